"""Attribute-inference adversaries and gradient-matching reconstruction."""

from recupfl.attacks.adversaries import (
    ADVERSARY_KINDS,
    Adversary,
    AdversaryDataset,
    AdversaryHyper,
    asr,
    build_adversary_dataset,
    infer_attribute,
    train_adversary,
)
from recupfl.attacks.features import PooledFeatures, default_pool_window, pool_gradients, pool_matrix, pooled_width
from recupfl.attacks.forest import RandomForest
from recupfl.attacks.reconstruction import (
    ReconstructionConfig,
    ReconstructionResult,
    reconstruct,
    reconstruction_mse,
    to_csv_grid,
    to_pgm,
)
from recupfl.attacks.svm import RbfSvm, smo_binary

__all__ = [
    "ADVERSARY_KINDS",
    "Adversary",
    "AdversaryDataset",
    "AdversaryHyper",
    "PooledFeatures",
    "RandomForest",
    "RbfSvm",
    "ReconstructionConfig",
    "ReconstructionResult",
    "asr",
    "build_adversary_dataset",
    "default_pool_window",
    "infer_attribute",
    "pool_gradients",
    "pool_matrix",
    "pooled_width",
    "reconstruct",
    "reconstruction_mse",
    "smo_binary",
    "to_csv_grid",
    "to_pgm",
    "train_adversary",
]

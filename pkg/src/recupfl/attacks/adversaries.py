"""Attribute-inference adversaries operating on pooled updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from recupfl.attacks.features import PooledFeatures, default_pool_window, pool_matrix
from recupfl.attacks.forest import RandomForest
from recupfl.attacks.svm import RbfSvm
from recupfl.errors import ConfigError, DataError
from recupfl.models import (
    DEFENDER_EPOCHS,
    DEFENDER_LR,
    MlpSpec,
    ZOO_WIDTHS,
    fit_standardizer,
    predict_class,
    sample_member_spec,
    train_mlp,
)

ADVERSARY_KINDS = ("stru-nn", "unkwn-nn", "svm-rbf", "random-forest")
UNKNOWN_WIDTHS = (1024, 1024, 512, 128)


@dataclass(frozen=True)
class AdversaryHyper:
    """Training choices shared by all adversaries of one experiment."""

    zoo_widths: tuple[int, ...] = ZOO_WIDTHS
    unknown_widths: tuple[int, ...] = UNKNOWN_WIDTHS
    epochs: int = DEFENDER_EPOCHS
    lr: float = DEFENDER_LR
    batch_size: int = 32
    svm_c: float = 1.0
    svm_tol: float = 1e-3
    forest_trees: int = 120


@dataclass
class AdversaryDataset:
    """Per-sample updates of one model snapshot with their attribute labels."""

    raw: np.ndarray  # (n, num_params)
    pooled: np.ndarray  # (n, pooled width)
    labels: np.ndarray
    layer_sizes: tuple[int, ...]
    window: int


def build_adversary_dataset(
    weights: Sequence[np.ndarray],
    spec: MlpSpec,
    x: np.ndarray,
    y: np.ndarray,
    attribute_labels: np.ndarray,
    window: int | None = None,
    loss_kind: str = "cross-entropy",
) -> AdversaryDataset:
    """Single-record updates ``grad_w L(x_i, y_i)`` at ``weights``, pooled."""
    from recupfl.fl import per_sample_gradients

    raw = per_sample_gradients(weights, spec, x, y, loss_kind)
    sizes = tuple(int(np.size(w)) for w in weights)
    window = default_pool_window(sizes) if window is None else int(window)
    return AdversaryDataset(raw, pool_matrix(raw, sizes, window), np.asarray(attribute_labels).astype(int), sizes, window)


@dataclass
class Adversary:
    kind: str
    attribute: str
    num_classes: int
    layer_sizes: tuple[int, ...]
    window: int
    shift: np.ndarray
    scale: np.ndarray
    model: object
    spec: MlpSpec | None = None
    metadata: dict = field(default_factory=dict)

    def predict_pooled(self, pooled: np.ndarray) -> np.ndarray:
        f = (np.atleast_2d(pooled) - self.shift) / self.scale
        if self.spec is not None:
            return predict_class(self.model, self.spec, f)
        return np.asarray(self.model.predict(f))

    def predict_raw(self, raw: np.ndarray) -> np.ndarray:
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        if raw.shape[1] != sum(self.layer_sizes):
            raise ConfigError(f"update has {raw.shape[1]} values, adversary expects {sum(self.layer_sizes)}")
        return self.predict_pooled(pool_matrix(raw, self.layer_sizes, self.window))


def train_adversary(
    kind: str,
    data: AdversaryDataset,
    num_classes: int,
    hyper: AdversaryHyper = AdversaryHyper(),
    seed: int = 0,
    attribute: str = "attribute",
) -> Adversary:
    if kind not in ADVERSARY_KINDS:
        raise ConfigError(f"unknown adversary kind {kind!r}; choose from {ADVERSARY_KINDS}")
    labels = data.labels
    if np.unique(labels).size < 2:
        raise DataError(f"attribute {attribute!r} has a single class in the adversary's training data")
    shift, scale = fit_standardizer(data.pooled)
    f = (data.pooled - shift) / scale
    spec = None
    if kind in ("stru-nn", "unkwn-nn"):
        if kind == "stru-nn":
            spec = sample_member_spec(np.random.default_rng([seed, 7001]), f.shape[1], num_classes, hyper.zoo_widths)
        else:
            spec = MlpSpec(f.shape[1], tuple(hyper.unknown_widths) + (num_classes,), seed=seed)
        model = train_mlp(spec, f, labels, epochs=hyper.epochs, lr=hyper.lr, batch_size=hyper.batch_size)
    elif kind == "svm-rbf":
        model = RbfSvm(c=hyper.svm_c, tol=hyper.svm_tol).fit(f, labels, num_classes)
    else:
        model = RandomForest(n_trees=hyper.forest_trees, seed=seed).fit(f, labels, num_classes)
    return Adversary(kind, attribute, num_classes, data.layer_sizes, data.window, shift, scale, model, spec)


def _raw_matrix(updates) -> np.ndarray:
    from recupfl.fl import ModelUpdate

    if isinstance(updates, ModelUpdate):
        return updates.flat()[None]
    if isinstance(updates, np.ndarray):
        return np.atleast_2d(updates)
    return np.stack([u.flat() if isinstance(u, ModelUpdate) else np.ravel(u) for u in updates])


def infer_attribute(adversary: Adversary, update) -> int:
    """Predicted attribute value for one update (raw or already pooled)."""
    if isinstance(update, PooledFeatures):
        if update.window != adversary.window:
            raise ConfigError("pooled features use a different window than the adversary")
        return int(adversary.predict_pooled(update.values)[0])
    return int(adversary.predict_raw(_raw_matrix(update))[0])


def asr(adversary: Adversary, updates, true_labels) -> float:
    """Fraction of updates whose attribute the adversary infers correctly."""
    true_labels = np.asarray(true_labels).astype(int).reshape(-1)
    if true_labels.size == 0:
        raise DataError("attack success rate of an empty evaluation set is undefined")
    raw = _raw_matrix(updates)
    if len(raw) != true_labels.size:
        raise DataError("one label per update is required")
    return float(np.mean(adversary.predict_raw(raw) == true_labels))

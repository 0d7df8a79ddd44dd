"""Baseline update defenses: clipping, DP noise, sparsification and Soteria."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from recupfl.errors import ConfigError
from recupfl.models import ACTIVATIONS, MlpSpec
from recupfl.numerics import autodiff as ad


def _split(update):
    """Return (flat vector, rebuild) for a ModelUpdate, layer list or flat array."""
    from recupfl.fl import ModelUpdate, unflatten

    if isinstance(update, ModelUpdate):
        return update.flat(), update.with_flat
    if isinstance(update, (list, tuple)):
        shapes = [np.shape(a) for a in update]
        vec = np.concatenate([np.ravel(np.asarray(a, dtype=np.float64)) for a in update])
        return vec, lambda v: list(unflatten(v, shapes))
    arr = np.asarray(update, dtype=np.float64)
    return arr.ravel().copy(), lambda v: np.asarray(v).reshape(arr.shape)


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


@dataclass(frozen=True)
class DpConfig:
    clip_bound: float
    sigma: float
    mu: float = 0.0

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ConfigError("clipping bound must be positive")
        if not self.sigma > 0:
            raise ConfigError("noise scale must be positive")


@dataclass(frozen=True)
class SparsifyConfig:
    ratio: float

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError("pruning ratio must lie in [0, 1)")


@dataclass(frozen=True)
class SoteriaConfig:
    ratio: float
    defend_layer: int | None = None  # index of the layer whose input is the defended representation

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError("pruning ratio must lie in [0, 1)")


def clip(update, bound: float):
    """Scale the update down to global L2 norm ``bound`` when it is larger."""
    if not bound > 0:
        raise ConfigError("clipping bound must be positive")
    vec, rebuild = _split(update)
    norm = float(np.linalg.norm(vec))
    return rebuild(vec / max(1.0, norm / bound))


def dp_gaussian(update, cfg: DpConfig, rng=None):
    vec, rebuild = _split(clip(update, cfg.clip_bound))
    return rebuild(vec + _rng(rng).normal(cfg.mu, cfg.sigma, vec.shape))


def dp_laplace(update, cfg: DpConfig, rng=None):
    vec, rebuild = _split(clip(update, cfg.clip_bound))
    return rebuild(vec + _rng(rng).laplace(cfg.mu, cfg.sigma, vec.shape))


def sparsify(update, ratio: float | SparsifyConfig):
    """Zero the ``floor(ratio * n)`` entries of smallest magnitude across all layers.

    Ties in magnitude are broken by flat index, lower index pruned first.
    """
    ratio = ratio.ratio if isinstance(ratio, SparsifyConfig) else SparsifyConfig(float(ratio)).ratio
    vec, rebuild = _split(update)
    k = int(math.floor(ratio * vec.size))
    if k > 0:
        order = np.argsort(np.abs(vec), kind="stable")
        vec[order[:k]] = 0.0
    return rebuild(vec)


def representation_scores(weights: Sequence[np.ndarray], spec: MlpSpec, x: np.ndarray, layer: int) -> np.ndarray:
    """Per-unit score ``|r_i| / ||d r_i / d x||`` of the input to ``layer``, averaged over rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    width = spec.layer_widths[layer - 1]
    # Row (s, i) of the repeated batch computes unit i's input gradient for sample s.
    xr = ad.tensor(np.repeat(x, width, axis=0), requires_grad=True)
    act = ACTIVATIONS[spec.activation]
    h = xr
    for i in range(layer):
        h = act(ad.matmul(h, weights[2 * i]) + weights[2 * i + 1])
    mask = np.tile(np.eye(width), (n, 1))
    (jac,) = ad.grad((h * mask).sum(), [xr])
    jnorm = np.linalg.norm(jac.value, axis=1).reshape(n, width)
    r = np.abs((h.value * mask).sum(axis=1)).reshape(n, width)
    return (r / np.maximum(jnorm, 1e-12)).mean(axis=0)


def soteria(update, weights: Sequence[np.ndarray], spec: MlpSpec, x: np.ndarray, cfg: SoteriaConfig):
    """Prune the gradient rows of the defended layer for the ``ceil(ratio * width)``
    representation units with the largest scores.

    A ratio of exactly 0 leaves the update unchanged.
    """
    n_layers = len(spec.layer_widths)
    layer = n_layers - 1 if cfg.defend_layer is None else int(cfg.defend_layer)
    if not 1 <= layer <= n_layers - 1:
        raise ConfigError(f"defended layer must lie in [1, {n_layers - 1}] for a {n_layers}-layer model")
    from recupfl.fl import ModelUpdate

    layers = list(update.layers) if isinstance(update, ModelUpdate) else [np.asarray(a, dtype=np.float64) for a in update]
    if len(layers) != 2 * n_layers:
        raise ConfigError("update does not match the model")
    width = spec.layer_widths[layer - 1]
    k = int(math.ceil(cfg.ratio * width))
    out = [np.array(a) for a in layers]
    if k > 0:
        scores = representation_scores(weights, spec, x, layer)
        pruned = np.argsort(-scores, kind="stable")[:k]
        out[2 * layer][pruned, :] = 0.0
    if isinstance(update, ModelUpdate):
        return ModelUpdate(update.client_id, update.round, tuple(out))
    return out

"""Pooled-gradient features: the adversary's (and defender models') view of an update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from recupfl.errors import ConfigError
from recupfl.numerics import autodiff as ad

TARGET_POOLED_WIDTH = 1024


@dataclass(frozen=True)
class PooledFeatures:
    values: np.ndarray
    window: int
    source: tuple[int, int] | None = None  # (client_id, round)


def pooled_width(layer_sizes: Sequence[int], window: int) -> int:
    if window < 1:
        raise ConfigError("pool window must be >= 1")
    return int(sum(-(-int(n) // window) for n in layer_sizes))


def default_pool_window(layer_sizes: Sequence[int], target: int = TARGET_POOLED_WIDTH) -> int:
    """Smallest window whose pooled width does not exceed ``target``."""
    window = max(1, -(-int(sum(layer_sizes)) // target))
    while pooled_width(layer_sizes, window) > target:
        window += 1
    return window


def pool_tensor(u: ad.Tensor, layer_sizes: Sequence[int], window: int) -> ad.Tensor:
    """Recorded per-layer max-pool over absolute values along the last axis."""
    return ad.segment_maxpool(ad.abs(u), layer_sizes, window)


def pool_matrix(updates: np.ndarray, layer_sizes: Sequence[int], window: int) -> np.ndarray:
    """Pool a batch of flattened updates (one per row)."""
    u = np.atleast_2d(np.asarray(updates, dtype=np.float64))
    return pool_tensor(ad.constant(u), layer_sizes, window).value


def pool_gradients(update, window: int, layer_sizes: Sequence[int] | None = None) -> PooledFeatures:
    """Flatten each layer, take non-overlapping maxima of ``|g|`` (last partial
    window kept), and concatenate the per-layer results."""
    from recupfl.fl import ModelUpdate

    if isinstance(update, ModelUpdate):
        vec, sizes, source = update.flat(), update.layer_sizes, (update.client_id, update.round)
    elif isinstance(update, (list, tuple)):
        vec = np.concatenate([np.ravel(a) for a in update])
        sizes, source = tuple(np.size(a) for a in update), None
    else:
        vec = np.ravel(np.asarray(update, dtype=np.float64))
        sizes, source = (tuple(layer_sizes) if layer_sizes is not None else (vec.size,)), None
    return PooledFeatures(pool_matrix(vec, sizes, window)[0], window, source)


def defender_features(u: ad.Tensor, layer_sizes, window, shift, scale) -> ad.Tensor:
    """Fixed input stage of every neural defender/adversary: pool, then standardize."""
    return (pool_tensor(u, layer_sizes, window) - shift) / scale

"""Plain SGD and Adam updates over lists of numpy parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from recupfl.errors import ConfigError


def _check_shapes(params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ConfigError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ConfigError(f"parameter {i}: shape {np.shape(p)} vs gradient {np.shape(g)}")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    """Return ``params - lr * grads`` elementwise, leaving the inputs untouched."""
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    _check_shapes(params, grads)
    return [np.asarray(p, dtype=np.float64) - lr * np.asarray(g, dtype=np.float64) for p, g in zip(params, grads)]


@dataclass(frozen=True)
class AdamState:
    params: tuple[np.ndarray, ...]
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0


def adam_init(params: Sequence[np.ndarray]) -> AdamState:
    ps = tuple(np.array(p, dtype=np.float64) for p in params)
    zeros = tuple(np.zeros_like(p) for p in ps)
    return AdamState(params=ps, m=zeros, v=zeros, step=0)


def adam_step(
    state: AdamState,
    grads: Sequence[np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update (Kingma & Ba); returns a new state."""
    if lr < 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or eps <= 0:
        raise ConfigError("invalid Adam hyperparameters")
    _check_shapes(state.params, grads)
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, m, v, g in zip(state.params, state.m, state.v, grads):
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return AdamState(params=tuple(new_p), m=tuple(new_m), v=tuple(new_v), step=t)

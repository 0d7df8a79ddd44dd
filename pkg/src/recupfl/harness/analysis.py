"""Comparing trade-off curves at matched utility.

A curve is the per-parameter median (over seeds) of (loss, ASR). Two curves
are compared on a shared grid of loss values spanning the range where both
are defined. Each curve is linearly interpolated after sorting its points by
loss.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from recupfl.harness.results import TradeoffPoint


@dataclass(frozen=True)
class Curve:
    params: np.ndarray
    loss: np.ndarray
    asr: np.ndarray

    def __len__(self) -> int:
        return len(self.params)


def median_curve(
    points: Iterable[TradeoffPoint], defense: str, adversary: str | None = None, round_: int | None = None
) -> Curve:
    """Per-parameter medians over seeds, ordered by parameter value."""
    groups: dict[float, list[tuple[float, float]]] = defaultdict(list)
    for p in points:
        if p.defense != defense or p.is_error or p.asr is None or p.loss is None:
            continue
        if adversary is not None and p.adversary != adversary:
            continue
        if round_ is not None and p.round != round_:
            continue
        groups[p.param].append((p.loss, p.asr))
    params = np.array(sorted(groups), dtype=float)
    loss = np.array([np.median([v[0] for v in groups[k]]) for k in params])
    asr = np.array([np.median([v[1] for v in groups[k]]) for k in params])
    return Curve(params, loss, asr)


def _interp(curve: Curve, grid: np.ndarray) -> np.ndarray:
    order = np.argsort(curve.loss, kind="stable")
    x, y = curve.loss[order], curve.asr[order]
    ux = np.unique(x)
    uy = np.array([y[x == v].mean() for v in ux])  # equal losses: average their ASR
    return np.interp(grid, ux, uy)


def matched_grid(a: Curve, b: Curve, n: int = 21) -> np.ndarray:
    """Shared loss grid over the overlap of both curves' loss ranges (empty when disjoint)."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros(0)
    lo = max(a.loss.min(), b.loss.min())
    hi = min(a.loss.max(), b.loss.max())
    if hi < lo:
        return np.zeros(0)
    if hi == lo:
        return np.array([lo])
    return np.linspace(lo, hi, n)


@dataclass(frozen=True)
class Comparison:
    grid: np.ndarray
    asr_a: np.ndarray
    asr_b: np.ndarray

    @property
    def n(self) -> int:
        return len(self.grid)

    def fraction_not_worse(self, tol: float = 0.0) -> float:
        """Share of grid points where curve ``a`` has ASR at most ``b``'s (plus ``tol``)."""
        if self.n == 0:
            return float("nan")
        return float(np.mean(self.asr_a <= self.asr_b + tol))

    def max_excess(self) -> float:
        """Largest amount by which ``a``'s ASR exceeds ``b``'s (0 when never)."""
        if self.n == 0:
            return float("nan")
        return float(max(0.0, np.max(self.asr_a - self.asr_b)))


def compare(a: Curve, b: Curve, n: int = 21) -> Comparison:
    grid = matched_grid(a, b, n)
    if grid.size == 0:
        return Comparison(grid, grid, grid)
    return Comparison(grid, _interp(a, grid), _interp(b, grid))


def compare_defenses(
    points: Sequence[TradeoffPoint],
    a: str,
    b: str,
    adversary: str,
    rounds: Sequence[int] | None = None,
    n: int = 21,
) -> Comparison:
    """Pool per-round matched-utility comparisons of defense ``a`` against ``b``."""
    if rounds is None:
        rounds = sorted({p.round for p in points})
    parts = [compare(median_curve(points, a, adversary, t), median_curve(points, b, adversary, t), n) for t in rounds]
    return Comparison(*(np.concatenate([getattr(c, f) for c in parts]) for f in ("grid", "asr_a", "asr_b")))

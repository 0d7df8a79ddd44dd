"""Kernel SVM trained by sequential minimal optimization.

The solver follows the second-order working-set selection used by LIBSVM and
stops when the maximal KKT violation ``m(a) - M(a)`` drops below ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from recupfl.errors import ConfigError, DataError

TAU = 1e-12


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def scale_gamma(x: np.ndarray) -> float:
    """``1 / (n_features * var(x))``, the usual data-scaled RBF width."""
    var = float(np.var(x))
    return 1.0 / (x.shape[1] * var) if var > 0 else 1.0


@dataclass
class BinarySmoResult:
    alpha: np.ndarray
    rho: float
    iterations: int
    gap: float


def smo_binary(kernel: np.ndarray, y: np.ndarray, c: float = 1.0, tol: float = 1e-3, max_iter: int = 100_000) -> BinarySmoResult:
    """Solve the C-SVM dual for labels ``y`` in {-1, +1} given a precomputed kernel.

    Decision function: ``sum_i alpha_i y_i K(x_i, x) - rho``.
    """
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("binary SVM labels must be -1 or +1")
    n = y.size
    qd = np.diag(kernel).copy()
    alpha = np.zeros(n)
    g = -np.ones(n)  # gradient of 0.5 a'Qa - e'a
    pos = y > 0
    it = 0
    gap = np.inf
    while it < max_iter:
        upper = alpha >= c
        lower = alpha <= 0
        # I_up: y=+1 and a<C, or y=-1 and a>0.  Score -y*G.
        in_up = np.where(pos, ~upper, ~lower)
        in_low = np.where(pos, ~lower, ~upper)
        score = -y * g
        if not in_up.any() or not in_low.any():
            break
        up_scores = np.where(in_up, score, -np.inf)
        i = int(np.argmax(up_scores))
        gmax = up_scores[i]
        low_scores = np.where(in_low, score, np.inf)
        gap = float(gmax - low_scores.min())
        if gap < tol:
            break
        qi = y[i] * y * kernel[i]  # Q_ij
        grad_diff = gmax - score
        cand = in_low & (grad_diff > 0)
        if not cand.any():
            break
        quad = qd[i] + qd - 2.0 * y[i] * y * qi
        quad = np.where(quad > 0, quad, TAU)
        obj = np.where(cand, -(grad_diff**2) / quad, np.inf)
        j = int(np.argmin(obj))
        qj = y[j] * y * kernel[j]
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            q = qd[i] + qd[j] + 2.0 * qi[j]
            delta = (-g[i] - g[j]) / (q if q > 0 else TAU)
            diff = ai - aj
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > c:
                    alpha[i], alpha[j] = c, c - diff
            elif alpha[j] > c:
                alpha[j], alpha[i] = c, c + diff
        else:
            q = qd[i] + qd[j] - 2.0 * qi[j]
            delta = (g[i] - g[j]) / (q if q > 0 else TAU)
            total = ai + aj
            alpha[i] -= delta
            alpha[j] += delta
            if total > c:
                if alpha[i] > c:
                    alpha[i], alpha[j] = c, total - c
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > c:
                if alpha[j] > c:
                    alpha[j], alpha[i] = c, total - c
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
        g += qi * (alpha[i] - ai) + qj * (alpha[j] - aj)
        it += 1
    free = (alpha > 0) & (alpha < c)
    yg = y * g
    if free.any():
        rho = float(yg[free].mean())
    else:
        ub, lb = np.inf, -np.inf
        # bounds on rho from variables at their limits
        at_up = alpha >= c
        for t in range(n):
            if (at_up[t] and y[t] < 0) or (not at_up[t] and y[t] > 0):
                ub = min(ub, yg[t])
            else:
                lb = max(lb, yg[t])
        rho = float((ub + lb) / 2) if np.isfinite(ub) and np.isfinite(lb) else float(ub if np.isfinite(ub) else lb)
    return BinarySmoResult(alpha, rho, it, gap)


@dataclass
class RbfSvm:
    """One-vs-rest RBF SVM; a two-class problem uses a single binary machine."""

    c: float = 1.0
    gamma: float | str = "scale"
    tol: float = 1e-3
    max_iter: int = 100_000

    def fit(self, x: np.ndarray, y: np.ndarray, num_classes: int | None = None) -> "RbfSvm":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y).astype(int)
        if len(x) != len(y) or len(x) == 0:
            raise DataError("SVM training set must be non-empty with one label per row")
        if self.c <= 0 or self.tol <= 0:
            raise ConfigError("C and tol must be positive")
        self.num_classes_ = int(num_classes if num_classes is not None else y.max() + 1)
        self.gamma_ = scale_gamma(x) if self.gamma == "scale" else float(self.gamma)
        self.x_ = x
        kernel = rbf_kernel(x, x, self.gamma_)
        present = np.unique(y)
        self.constant_ = int(present[0]) if present.size == 1 else None
        self.machines_: list[tuple[np.ndarray, float]] = []
        targets = [int(present[1])] if present.size == 2 else [int(k) for k in range(self.num_classes_)]
        self.targets_ = targets
        self.binary_negative_ = int(present[0]) if present.size == 2 else None
        for k in targets if self.constant_ is None else []:
            yy = np.where(y == k, 1.0, -1.0)
            if np.all(yy < 0):
                self.machines_.append((np.zeros(len(y)), np.inf))
                continue
            res = smo_binary(kernel, yy, self.c, self.tol, self.max_iter)
            self.machines_.append((res.alpha * yy, res.rho))
        return self

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        kernel = rbf_kernel(np.atleast_2d(np.asarray(x, dtype=np.float64)), self.x_, self.gamma_)
        return np.stack([kernel @ coef - rho for coef, rho in self.machines_], axis=1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        n = len(np.atleast_2d(x))
        if self.constant_ is not None:
            return np.full(n, self.constant_)
        scores = self.decision_function(x)
        if self.binary_negative_ is not None:
            return np.where(scores[:, 0] > 0, self.targets_[0], self.binary_negative_)
        return np.asarray(self.targets_)[np.argmax(scores, axis=1)]

"""Random forest of CART trees (gini impurity, bootstrap rows, sqrt(d) features per split)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from recupfl.errors import ConfigError, DataError


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray  # majority class at each node

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            nd = node[rows]
            go_left = x[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.label[node]


def _best_split(x: np.ndarray, y: np.ndarray, num_classes: int, features: np.ndarray):
    """Lowest weighted gini over all thresholds of the candidate features."""
    m = len(y)
    xs = x[:, features]
    order = np.argsort(xs, axis=0, kind="stable")
    vals = np.take_along_axis(xs, order, axis=0)
    onehot = np.eye(num_classes)[y[order]]  # (m, f, c)
    cum = np.cumsum(onehot, axis=0)
    left = cum[:-1]
    right = cum[-1][None] - left
    nl = np.arange(1, m, dtype=np.float64)[:, None]
    nr = m - nl
    gini_l = 1.0 - ((left / nl[..., None]) ** 2).sum(axis=2)
    gini_r = 1.0 - ((right / nr[..., None]) ** 2).sum(axis=2)
    score = (nl * gini_l + nr * gini_r) / m
    valid = vals[1:] > vals[:-1]
    if not valid.any():
        return None
    score = np.where(valid, score, np.inf)
    k, f = np.unravel_index(int(np.argmin(score)), score.shape)
    lo, hi = vals[k, f], vals[k + 1, f]
    mid = (lo + hi) / 2.0
    return int(features[f]), float(mid if mid < hi else lo), float(score[k, f])


def build_tree(
    x: np.ndarray, y: np.ndarray, num_classes: int, rng: np.random.Generator, max_features: int, max_depth: int | None = None
) -> Tree:
    feature, threshold, left, right, label = [], [], [], [], []

    def new_node(idx):
        counts = np.bincount(y[idx], minlength=num_classes)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        label.append(int(np.argmax(counts)))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    d = x.shape[1]
    while stack:
        node, idx, depth = stack.pop()
        yy = y[idx]
        if len(idx) < 2 or np.all(yy == yy[0]) or (max_depth is not None and depth >= max_depth):
            continue
        feats = np.sort(rng.choice(d, size=max_features, replace=False))
        split = _best_split(x[idx], yy, num_classes, feats)
        if split is None and max_features < d:
            split = _best_split(x[idx], yy, num_classes, np.arange(d))
        if split is None:
            continue
        f, t, _ = split
        mask = x[idx, f] <= t
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, t
        left[node], right[node] = new_node(li), new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(label, dtype=np.int64),
    )


@dataclass
class RandomForest:
    n_trees: int = 120
    max_features: str | int = "sqrt"
    bootstrap: bool = True
    max_depth: int | None = None
    seed: int = 0
    trees: list[Tree] = field(default_factory=list)

    def fit(self, x: np.ndarray, y: np.ndarray, num_classes: int | None = None) -> "RandomForest":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y).astype(np.int64)
        if len(x) != len(y) or len(x) == 0:
            raise DataError("forest training set must be non-empty with one label per row")
        if self.n_trees < 1:
            raise ConfigError("a forest needs at least one tree")
        self.num_classes_ = int(num_classes if num_classes is not None else y.max() + 1)
        d = x.shape[1]
        mf = max(1, int(np.sqrt(d))) if self.max_features == "sqrt" else int(self.max_features)
        mf = min(mf, d)
        self.trees = []
        for t in range(self.n_trees):
            rng = np.random.default_rng([self.seed, t])
            rows = rng.integers(0, len(y), len(y)) if self.bootstrap else np.arange(len(y))
            self.trees.append(build_tree(x[rows], y[rows], self.num_classes_, rng, mf, self.max_depth))
        return self

    def tree_predictions(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.stack([t.predict(x) for t in self.trees], axis=1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Majority vote over trees; ties go to the lowest class index."""
        votes = self.tree_predictions(x)
        counts = np.stack([(votes == k).sum(axis=1) for k in range(self.num_classes_)], axis=1)
        return np.argmax(counts, axis=1)

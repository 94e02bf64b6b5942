"""K-nearest-neighbours and random-forest classifiers for encoder embeddings.

Ties always resolve toward the smallest index: equal distances prefer the
lower training index, equal votes the smaller class id, equal split gains the
lower feature index and threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, KExceedsTrainingSize, TooFewSamples
from .rng import substream


def _majority(votes: np.ndarray, k: int) -> np.ndarray:
    """Row-wise majority over integer votes; ties go to the smallest class id."""
    counts = np.zeros((votes.shape[0], k), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(votes.shape[0]), votes.shape[1]), votes.ravel()), 1)
    return counts.argmax(axis=1), counts


class KNNClassifier:
    def __init__(self, k: int = 5):
        self.k = k

    def fit(self, x, y, num_classes: int | None = None) -> "KNNClassifier":
        x = np.asarray(x, dtype=np.float32)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise DimensionMismatch(f"expected (N, D) features and N labels, got {x.shape}, {y.shape}")
        if self.k > x.shape[0]:
            raise KExceedsTrainingSize(f"k={self.k} exceeds training size {x.shape[0]}")
        self.x_, self.y_ = x, y
        self.num_classes_ = int(num_classes if num_classes is not None else y.max() + 1)
        return self

    def neighbours(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float32)
        if q.ndim != 2 or q.shape[1] != self.x_.shape[1]:
            raise DimensionMismatch(f"queries must be (M, {self.x_.shape[1]}), got {q.shape}")
        out = np.empty((q.shape[0], self.k), dtype=np.int64)
        x = self.x_.astype(np.float64)
        for s in range(0, q.shape[0], 64):
            d = ((q[s : s + 64, None, :].astype(np.float64) - x[None]) ** 2).sum(axis=2)
            out[s : s + 64] = np.argsort(d, axis=1, kind="stable")[:, : self.k]
        return out

    def predict_proba(self, q) -> np.ndarray:
        _, counts = _majority(self.y_[self.neighbours(q)], self.num_classes_)
        return counts / self.k

    def predict(self, q) -> np.ndarray:
        return _majority(self.y_[self.neighbours(q)], self.num_classes_)[0]


def knn_predict(model: KNNClassifier, queries) -> np.ndarray:
    return model.predict(queries)


# ---------------------------------------------------------------------------
# decision trees


@dataclass
class Tree:
    """Flat array tree. ``left[i] == -1`` marks a leaf; ``value`` holds class counts."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return self.feature.size

    def apply(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = self.left[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = x[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.left[node] >= 0
        return node

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)].argmax(axis=1)


def gini(counts: np.ndarray) -> np.ndarray:
    n = counts.sum(axis=-1)
    p = counts / np.maximum(n, 1)[..., None]
    return 1.0 - (p * p).sum(axis=-1)


def best_split(x: np.ndarray, y: np.ndarray, k: int, features) -> tuple[float, int, float]:
    """Best (gain, feature, threshold) over ``features`` by Gini decrease.

    Candidate thresholds are float32 midpoints between consecutive distinct
    values (moved down to the lower value when rounding reaches the upper one).
    Returns gain 0 and feature -1 when no split improves impurity.
    """
    n = y.size
    parent = np.bincount(y, minlength=k).astype(np.float64)
    parent_imp = float(gini(parent))
    best = (0.0, -1, 0.0)
    onehot = np.eye(k)[y]
    for f in sorted(features):
        col = x[:, f]
        order = np.argsort(col, kind="stable")
        v = col[order]
        cuts = np.flatnonzero(v[1:] != v[:-1])  # split after position cut
        if cuts.size == 0:
            continue
        left = np.cumsum(onehot[order], axis=0)[cuts]
        right = parent - left
        nl = (cuts + 1).astype(np.float64)
        imp = (nl * gini(left) + (n - nl) * gini(right)) / n
        gains = parent_imp - imp
        j = int(np.argmax(gains))
        if gains[j] > best[0] + 1e-12:
            a, b = v[cuts[j]], v[cuts[j] + 1]
            thr = np.float32((np.float64(a) + np.float64(b)) / 2)
            if thr >= b:
                thr = a
            best = (float(gains[j]), int(f), float(thr))
    return best


def fit_tree(x: np.ndarray, y: np.ndarray, k: int, max_features: int, rng: np.random.Generator) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(counts):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts)
        return len(feature) - 1

    root = new_node(np.bincount(y, minlength=k))
    stack = [(root, np.arange(y.size))]
    d = x.shape[1]
    while stack:
        node, idx = stack.pop()
        counts = value[node]
        if np.count_nonzero(counts) <= 1:
            continue
        feats = rng.choice(d, size=max_features, replace=False)
        gain, f, thr = best_split(x[idx], y[idx], k, feats)
        if f < 0 or gain <= 0:
            continue
        mask = x[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(np.bincount(y[li], minlength=k))
        right[node] = new_node(np.bincount(y[ri], minlength=k))
        stack.append((right[node], ri))
        stack.append((left[node], li))
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float32),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.int64).reshape(-1, k),
    )


@dataclass
class RandomForest:
    n_estimators: int = 100
    seed: int = 0
    bootstrap: bool = True
    trees: list[Tree] = field(default_factory=list)
    num_classes: int = 0
    n_features: int = 0

    def fit(self, x, y, num_classes: int | None = None) -> "RandomForest":
        x = np.asarray(x, dtype=np.float32)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise DimensionMismatch(f"expected (N, D) features and N labels, got {x.shape}, {y.shape}")
        if x.shape[0] < 2:
            raise TooFewSamples("random forest needs at least 2 samples")
        self.num_classes = int(num_classes if num_classes is not None else y.max() + 1)
        self.n_features = x.shape[1]
        max_features = max(1, int(math.sqrt(self.n_features)))
        self.trees = []
        for i in range(self.n_estimators):
            rng = substream(self.seed + i, "tree")
            idx = rng.integers(0, x.shape[0], size=x.shape[0]) if self.bootstrap else np.arange(x.shape[0])
            self.trees.append(fit_tree(x[idx], y[idx], self.num_classes, max_features, rng))
        return self

    def _votes(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float32)
        if q.ndim != 2 or q.shape[1] != self.n_features:
            raise DimensionMismatch(f"queries must be (M, {self.n_features}), got {q.shape}")
        return np.stack([t.predict(q) for t in self.trees], axis=1)

    def predict_proba(self, q) -> np.ndarray:
        _, counts = _majority(self._votes(q), self.num_classes)
        return counts / len(self.trees)

    def predict(self, q) -> np.ndarray:
        return _majority(self._votes(q), self.num_classes)[0]


def rf_fit(embeddings, labels, seed: int = 0, n_estimators: int = 100, num_classes=None) -> RandomForest:
    return RandomForest(n_estimators, seed).fit(embeddings, labels, num_classes)


def rf_predict(model: RandomForest, queries) -> np.ndarray:
    return model.predict(queries)

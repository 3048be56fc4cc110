"""Random forest of Gini CART trees grown on bootstrap resamples.

Each tree draws ``n`` rows with replacement (kept as integer weights), and
each split considers a random subset of ``max_features`` columns drawn
without replacement. Among equally good splits the lowest column index wins,
then the lowest threshold. ``predict_proba`` is the fraction of trees whose
leaf majority (ties -> lowest class index) votes for each class.
"""
from __future__ import annotations

import math

import numpy as np

from .base import Classifier


def n_split_features(max_features, d: int) -> int:
    if max_features == "sqrt":
        return max(1, int(math.sqrt(d)))
    if isinstance(max_features, float):
        return max(1, min(d, int(max_features * d)))
    return max(1, min(d, int(max_features)))


def _gini(counts):
    tot = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / tot[..., None]
    return np.where(tot > 0, 1.0 - np.sum(p * p, axis=-1), 0.0)


def best_split(X, y, w, n_classes, features):
    """Best Gini split over ``features`` (ascending) for weighted rows.

    Returns ``(gain, feature, threshold)`` or ``None`` when no column in the
    subset separates the rows.
    """
    Xs = X[:, features]                                   # [m, k]
    order = np.argsort(Xs, axis=0, kind="stable")
    vals = np.take_along_axis(Xs, order, axis=0)
    onehot = np.zeros((len(y), n_classes))
    onehot[np.arange(len(y)), y] = w
    left = np.cumsum(onehot[order], axis=0)               # [m, k, K]
    total = left[-1]                                      # [k, K]
    left = left[:-1]
    right = total[None] - left
    nl = left.sum(-1)
    nr = right.sum(-1)
    n = nl + nr
    child = (nl * _gini(left) + nr * _gini(right)) / n
    parent = _gini(total[0])
    gain = parent - child                                 # [m-1, k]
    distinct = vals[1:] > vals[:-1]
    gain = np.where(distinct, gain, -np.inf)
    if not np.isfinite(gain).any():
        return None
    best = gain.max()
    # tolerance keeps ties deterministic in the presence of rounding
    hits = np.argwhere(gain >= best - 1e-12 * max(1.0, abs(best)))
    # argwhere is row-major (position, feature): choose lowest feature, then lowest position
    f_col = hits[:, 1].min()
    pos = hits[hits[:, 1] == f_col, 0].min()
    lo, hi = vals[pos, f_col], vals[pos + 1, f_col]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(gain[pos, f_col]), int(features[f_col]), float(thr)


class DecisionTree:
    def __init__(self, max_depth=None, max_features="sqrt", min_samples_split=2):
        self.max_depth = max_depth
        self.max_features = max_features
        self.min_samples_split = min_samples_split

    def fit(self, X, y, w, n_classes, rng):
        d = X.shape[1]
        k = n_split_features(self.max_features, d)
        feat, thr, left, right, value = [], [], [], [], []

        def new_node(counts):
            feat.append(-1)
            thr.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(counts)
            return len(feat) - 1

        rows = np.flatnonzero(w > 0)
        stack = [(rows, 0, None)]
        while stack:
            idx, depth, slot = stack.pop()
            counts = np.bincount(y[idx], weights=w[idx], minlength=n_classes)
            node = new_node(counts)
            if slot is not None:
                parent, side = slot
                (left if side == 0 else right)[parent] = node
            if (np.count_nonzero(counts) <= 1 or w[idx].sum() < self.min_samples_split
                    or (self.max_depth is not None and depth >= self.max_depth) or idx.size < 2):
                continue
            fs = np.sort(rng.choice(d, size=k, replace=False)) if k < d else np.arange(d)
            split = best_split(X[idx], y[idx], w[idx], n_classes, fs)
            if split is None:
                continue
            _, f, t = split
            feat[node], thr[node] = f, t
            go_left = X[idx, f] <= t
            # right pushed first so the left subtree gets the lower node ids
            stack.append((idx[~go_left], depth + 1, (node, 1)))
            stack.append((idx[go_left], depth + 1, (node, 0)))
        self.feature_ = np.asarray(feat, dtype=np.int64)
        self.threshold_ = np.asarray(thr, dtype=float)
        self.left_ = np.asarray(left, dtype=np.int64)
        self.right_ = np.asarray(right, dtype=np.int64)
        self.value_ = np.asarray(value, dtype=float).reshape(len(feat), n_classes)
        return self

    def apply(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature_[node] >= 0
        while active.any():
            r = np.flatnonzero(active)
            n = node[r]
            go_left = X[r, self.feature_[n]] <= self.threshold_[n]
            node[r] = np.where(go_left, self.left_[n], self.right_[n])
            active = self.feature_[node] >= 0
        return node

    def vote(self, X):
        return np.argmax(self.value_[self.apply(X)], axis=1)

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature_), dtype=np.int64)
        for i in range(len(self.feature_)):
            if self.feature_[i] >= 0:
                depth[self.left_[i]] = depth[self.right_[i]] = depth[i] + 1
        return int(depth.max())


class RandomForest(Classifier):
    kind = "RF"

    def _tree_rng(self, t):
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(t,)))

    def _fit(self, X, y):
        n = X.shape[0]
        k = len(self.classes_)
        p = self.params
        self.trees_ = []
        self.inbag_ = np.zeros((p.n_trees, n), dtype=np.int64)
        for t in range(p.n_trees):
            rng = self._tree_rng(t)
            counts = np.bincount(rng.integers(0, n, size=n), minlength=n)
            self.inbag_[t] = counts
            tree = DecisionTree(p.max_depth, p.max_features, p.min_samples_split)
            self.trees_.append(tree.fit(X, y, counts.astype(float), k, rng))
        self._oob(X, y)

    def _oob(self, X, y):
        k = len(self.classes_)
        votes = np.zeros((X.shape[0], k))
        for tree, counts in zip(self.trees_, self.inbag_):
            oob = counts == 0
            if oob.any():
                v = tree.vote(X[oob])
                np.add.at(votes, (np.flatnonzero(oob), v), 1)
        has = votes.sum(axis=1) > 0
        self.oob_score_ = float(np.mean(np.argmax(votes[has], axis=1) == y[has])) if has.any() else float("nan")

    def tree_votes(self, X) -> np.ndarray:
        """Per-tree class-index votes, shape [n_trees, rows]."""
        X = self._check_predict(X)
        return np.stack([t.vote(X) for t in self.trees_])

    def _proba(self, X):
        votes = np.stack([t.vote(X) for t in self.trees_])
        k = len(self.classes_)
        P = np.zeros((X.shape[0], k))
        for c in range(k):
            P[:, c] = np.mean(votes == c, axis=0)
        return P

    def _state(self):
        arrays = {}
        for i, t in enumerate(self.trees_):
            arrays[f"t{i:04d}_feature"] = t.feature_
            arrays[f"t{i:04d}_threshold"] = t.threshold_
            arrays[f"t{i:04d}_left"] = t.left_
            arrays[f"t{i:04d}_right"] = t.right_
            arrays[f"t{i:04d}_value"] = t.value_
        return {"n_trees": len(self.trees_), "oob_score": self.oob_score_}, arrays

    def _load_state(self, meta, arrays):
        p = self.params
        self.oob_score_ = meta["oob_score"]
        self.trees_ = []
        for i in range(meta["n_trees"]):
            t = DecisionTree(p.max_depth, p.max_features, p.min_samples_split)
            t.feature_ = arrays[f"t{i:04d}_feature"]
            t.threshold_ = arrays[f"t{i:04d}_threshold"]
            t.left_ = arrays[f"t{i:04d}_left"]
            t.right_ = arrays[f"t{i:04d}_right"]
            t.value_ = arrays[f"t{i:04d}_value"].reshape(-1, len(self.classes_))
            self.trees_.append(t)

"""Gradient-boosted trees and random forests over the shared tree grower.

Both families use the same regularized gain and leaf-weight rule (soft
thresholding by the L1 term, L2 in the denominator).  Boosting fits squared
-error residuals with shrinkage and patience-based early stopping on the
validation set; the forest bags independent trees fit directly to the targets
and averages them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import _tree_kernels as tk
from .base import FitError, TrainedModel

EARLY_STOP_PATIENCE = 50


def _as_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    # column-major layout keeps per-feature gathers in the split search local
    X = np.asfortranarray(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise FitError("expected X (n, d) and y (n,) of matching length")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise FitError("tree learners require finite inputs")
    return X, y


def _sample_count(ratio: float, total: int) -> tuple[int, bool]:
    """Rounded ratio * total, clamped to at least one element."""
    k = int(round(ratio * total))
    if k < 1:
        return 1, True
    return min(k, total), False


@dataclass(frozen=True)
class _StackedTrees:
    """Ensemble node storage: flat arrays plus per-tree offsets."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    offsets: np.ndarray

    @property
    def n_trees(self) -> int:
        return int(self.offsets.size - 1)

    @classmethod
    def from_trees(cls, trees: list[tuple[np.ndarray, ...]]) -> "_StackedTrees":
        offsets = np.zeros(len(trees) + 1, dtype=np.int64)
        for i, t in enumerate(trees):
            offsets[i + 1] = offsets[i] + t[0].size
        if trees:
            return cls(
                feature=np.concatenate([t[0] for t in trees]),
                threshold=np.concatenate([t[1] for t in trees]),
                left=np.concatenate([t[2] for t in trees]),
                right=np.concatenate([t[3] for t in trees]),
                value=np.concatenate([t[4] for t in trees]),
                offsets=offsets,
            )
        return cls(
            feature=np.empty(0, np.int32),
            threshold=np.empty(0, np.float64),
            left=np.empty(0, np.int32),
            right=np.empty(0, np.int32),
            value=np.empty(0, np.float64),
            offsets=offsets,
        )

    def tree_depths(self) -> list[int]:
        """Maximum leaf depth of each tree (0 for a stump-less single leaf)."""
        depths = []
        for t in range(self.n_trees):
            lo, hi = int(self.offsets[t]), int(self.offsets[t + 1])
            feature = self.feature[lo:hi]
            left = self.left[lo:hi]
            right = self.right[lo:hi]
            depth = np.zeros(hi - lo, dtype=np.int64)
            best = 0
            for node in range(hi - lo):
                if feature[node] >= 0:
                    depth[left[node]] = depth[node] + 1
                    depth[right[node]] = depth[node] + 1
                else:
                    best = max(best, int(depth[node]))
            depths.append(best)
        return depths


@dataclass(frozen=True)
class GbtModel(TrainedModel):
    base_score: float
    learning_rate: float
    trees: _StackedTrees
    n_features: int
    max_depth: int
    best_round: int
    train_rmse_history: tuple[float, ...] = ()
    val_rmse_history: tuple[float, ...] = ()
    n_clamped: int = 0
    tag: str = "gbt"

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(self._check(X))
        t = self.trees
        return tk.stacked_sum(
            t.feature, t.threshold, t.left, t.right, t.value, t.offsets, X,
            self.learning_rate, self.base_score,
        )


@dataclass(frozen=True)
class ForestModel(TrainedModel):
    trees: _StackedTrees
    n_features: int
    max_depth: int
    n_clamped: int = 0
    tag: str = "rf"

    def tree_predictions(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(self._check(X))
        t = self.trees
        return tk.stacked_per_tree(
            t.feature, t.threshold, t.left, t.right, t.value, t.offsets, X
        )

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.tree_predictions(X).mean(axis=0)


def fit_gbt(
    train_X: np.ndarray,
    train_y: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    hp: Mapping[str, float],
    seed: int = 0,
) -> GbtModel:
    """Squared-error boosting with exact greedy splits.

    Per round: rows are subsampled without replacement and columns per tree;
    the new tree fits the negative residuals' gradient statistics and its
    shrunken leaf values accumulate onto the running predictions.  Stops when
    validation RMSE has not improved for EARLY_STOP_PATIENCE rounds and keeps
    the best-round prefix.
    """
    X, y = _as_xy(train_X, train_y)
    Xv, yv = _as_xy(val_X, val_y)
    n, d = X.shape

    subsample = float(hp.get("subsample", 1.0))
    colsample = float(hp.get("colsample_bytree", 1.0))
    max_depth = int(hp["max_depth"])
    n_rounds = int(hp["n_rounds"])
    alpha = float(hp.get("reg_alpha", 0.0))
    lam = float(hp.get("reg_lambda", 0.0))
    lr = float(hp["learning_rate"])
    if max_depth < 1:
        raise FitError("max_depth must be >= 1")

    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0x7FFFFFFF, 0xB005)))
    base = float(y.mean())
    preds = np.full(n, base)
    preds_val = np.full(Xv.shape[0], base)

    trees: list[tuple[np.ndarray, ...]] = []
    train_hist: list[float] = []
    val_hist: list[float] = []
    best_val = float(np.sqrt(np.mean((yv - preds_val) ** 2)))
    best_round = 0
    since_best = 0
    n_clamped = 0
    all_cols = np.arange(d, dtype=np.int32)

    for _ in range(n_rounds):
        grad = preds - y
        if subsample < 1.0:
            k, clamped = _sample_count(subsample, n)
            n_clamped += clamped
            rows = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
        else:
            rows = np.arange(n, dtype=np.int64)
        if colsample < 1.0:
            k, clamped = _sample_count(colsample, d)
            n_clamped += clamped
            cols = np.sort(rng.choice(d, size=k, replace=False)).astype(np.int32)
        else:
            cols = all_cols

        f, thr, le, ri, va, _ = tk.grow_tree(
            X, grad, rows, cols, max_depth, alpha, lam, 1.0, 1.0, np.uint64(0)
        )
        trees.append((f, thr, le, ri, va))
        preds += lr * tk.tree_values(f, thr, le, ri, va, X)
        preds_val += lr * tk.tree_values(f, thr, le, ri, va, Xv)

        train_hist.append(float(np.sqrt(np.mean((y - preds) ** 2))))
        val_rmse = float(np.sqrt(np.mean((yv - preds_val) ** 2)))
        val_hist.append(val_rmse)
        if val_rmse < best_val:
            best_val = val_rmse
            best_round = len(trees)
            since_best = 0
        else:
            since_best += 1
            if since_best >= EARLY_STOP_PATIENCE:
                break

    return GbtModel(
        base_score=base,
        learning_rate=lr,
        trees=_StackedTrees.from_trees(trees[:best_round]),
        n_features=d,
        max_depth=max_depth,
        best_round=best_round,
        train_rmse_history=tuple(train_hist),
        val_rmse_history=tuple(val_hist),
        n_clamped=n_clamped,
    )


def fit_random_forest(
    train_X: np.ndarray,
    train_y: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    hp: Mapping[str, float],
    seed: int = 0,
) -> ForestModel:
    """Bootstrap-aggregated trees with hierarchical column subsampling.

    Each tree trains on n rows drawn with replacement and fits the targets
    directly through the shared regularized-gain rule; prediction is the
    arithmetic mean over trees.  The searched learning rate has no shrinkage
    stage to act on and is deliberately ignored (averaging only).
    """
    X, y = _as_xy(train_X, train_y)
    _as_xy(val_X, val_y)  # shape/finiteness check; validation unused by bagging
    n, d = X.shape

    bytree = float(hp.get("colsample_bytree", 1.0))
    bylevel = float(hp.get("colsample_bylevel", 1.0))
    bynode = float(hp.get("colsample_bynode", 1.0))
    max_depth = int(hp["max_depth"])
    n_trees = int(hp["n_trees"])
    alpha = float(hp.get("reg_alpha", 0.0))
    lam = float(hp.get("reg_lambda", 0.0))
    if n_trees < 1:
        raise FitError("n_trees must be >= 1")
    if max_depth < 1:
        raise FitError("max_depth must be >= 1")

    grad = -y  # gradient of squared error at a zero prediction
    trees: list[tuple[np.ndarray, ...]] = []
    n_clamped = 0
    for t in range(n_trees):
        # per-tree stream independent of any scheduling
        rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0x7FFFFFFF, t)))
        rows = rng.integers(0, n, size=n).astype(np.int64)
        if bytree < 1.0:
            k, clamped = _sample_count(bytree, d)
            n_clamped += clamped
            cols = np.sort(rng.choice(d, size=k, replace=False)).astype(np.int32)
        else:
            cols = np.arange(d, dtype=np.int32)
        kernel_seed = np.uint64(rng.integers(0, 2**63, dtype=np.int64))
        f, thr, le, ri, va, clamps = tk.grow_tree(
            X, grad, rows, cols, max_depth, alpha, lam, bylevel, bynode, kernel_seed
        )
        n_clamped += int(clamps)
        trees.append((f, thr, le, ri, va))

    return ForestModel(
        trees=_StackedTrees.from_trees(trees),
        n_features=d,
        max_depth=max_depth,
        n_clamped=n_clamped,
    )

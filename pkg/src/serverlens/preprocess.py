"""K-nearest-neighbor imputation and standardization, fit on training data only."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Diagnostic


class FitError(ValueError):
    """Preprocessing cannot be fit on the given rows."""


@dataclass(frozen=True)
class TaggedRows:
    """Feature rows carrying their partition label, for leakage guarding."""

    X: np.ndarray
    partition: str  # "train" | "validation" | "test"


def _as_train_array(rows: np.ndarray | TaggedRows, what: str) -> np.ndarray:
    if isinstance(rows, TaggedRows):
        if rows.partition != "train":
            raise FitError(f"{what} must be fit on training rows, got {rows.partition!r}")
        return rows.X
    return rows


def _as_array(rows: np.ndarray | TaggedRows) -> np.ndarray:
    return rows.X if isinstance(rows, TaggedRows) else rows


@dataclass(frozen=True)
class ImputerModel:
    """Reference rows retained at fit time plus per-feature fallback means."""

    k: int
    reference: np.ndarray  # training rows, missing cells kept as NaN
    means: np.ndarray      # per-feature mean over observed training values

    @property
    def n_features(self) -> int:
        return int(self.reference.shape[1])


def fit_imputer(
    train: np.ndarray | TaggedRows,
    k: int = 5,
    feature_names: Sequence[str] | None = None,
) -> ImputerModel:
    """Retain training rows and observed-value means for KNN imputation.

    Raises ``FitError`` when k exceeds the row count or when a feature has no
    observed value anywhere in the training rows (naming the feature).
    """
    X = np.asarray(_as_train_array(train, "imputer"), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise FitError("imputer needs a non-empty 2-D row matrix")
    if k < 1:
        raise FitError("k must be >= 1")
    if k > X.shape[0]:
        raise FitError(f"k={k} exceeds the {X.shape[0]} training rows")
    observed = ~np.isnan(X)
    fully_missing = np.flatnonzero(~observed.any(axis=0))
    if fully_missing.size:
        j = int(fully_missing[0])
        name = feature_names[j] if feature_names is not None else f"column {j}"
        raise FitError(f"feature {name!r} is missing in every training row")
    with np.errstate(invalid="ignore"):
        means = np.nanmean(X, axis=0)
    return ImputerModel(k=int(k), reference=X.copy(), means=means)


def _masked_sq_distances(Q: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared Euclidean distance over mutually observed coordinates,
    rescaled by d / (#mutually observed).  Pairs with no overlap get +inf."""
    d = Q.shape[1]
    q_obs = ~np.isnan(Q)
    r_obs = ~np.isnan(R)
    Qz = np.where(q_obs, Q, 0.0)
    Rz = np.where(r_obs, R, 0.0)
    counts = q_obs.astype(np.float64) @ r_obs.T.astype(np.float64)
    sq = (Qz**2) @ r_obs.T + q_obs @ (Rz**2).T - 2.0 * (Qz @ Rz.T)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(counts > 0, sq * (d / np.maximum(counts, 1.0)), np.inf)
    return scaled, counts


def apply_imputer(
    model: ImputerModel, rows: np.ndarray | TaggedRows
) -> tuple[np.ndarray, list[Diagnostic]]:
    """Fill every missing cell from the k nearest reference rows.

    Neighbors that also miss the feature are skipped in favor of the next
    nearest; if no neighbor observes it, the training mean is used.  Rows with
    every feature missing fall back entirely to training means (reported).
    Complete rows pass through unchanged.
    """
    X = np.asarray(_as_array(rows), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected rows with {model.n_features} features")
    missing = np.isnan(X)
    if not missing.any():
        return X.copy(), []

    out = X.copy()
    diags: list[Diagnostic] = []
    ref_obs = ~np.isnan(model.reference)
    incomplete = np.flatnonzero(missing.any(axis=1))
    dists, _ = _masked_sq_distances(X[incomplete], model.reference)
    for pos, i in enumerate(incomplete):
        row_missing = np.flatnonzero(missing[i])
        if row_missing.size == model.n_features:
            out[i] = model.means
            diags.append(Diagnostic(None, None, f"row {i}: all features missing; used training means"))
            continue
        order = np.argsort(dists[pos], kind="stable")
        finite = order[np.isfinite(dists[pos][order])]
        for j in row_missing:
            observers = finite[ref_obs[finite, j]]
            if observers.size == 0:
                out[i, j] = model.means[j]
            else:
                chosen = observers[: model.k]
                out[i, j] = float(np.mean(model.reference[chosen, j]))
    return out, diags


@dataclass(frozen=True)
class ScalerModel:
    """Per-feature mean and population standard deviation.

    Zero-variance features keep a sentinel sd of 1 and are flagged so callers
    can tell a genuinely constant column from a scaled one.
    """

    mean: np.ndarray
    sd: np.ndarray
    zero_variance: np.ndarray  # bool per feature

    @property
    def n_features(self) -> int:
        return int(self.mean.shape[0])


def fit_scaler(train: np.ndarray | TaggedRows) -> ScalerModel:
    X = np.asarray(_as_train_array(train, "scaler"), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise FitError("scaler needs at least two complete rows")
    if np.isnan(X).any():
        raise FitError("scaler input must be complete (impute first)")
    mean = X.mean(axis=0)
    sd = X.std(axis=0)  # population sd, so scaled training columns hit sd=1 exactly
    zero = sd == 0.0
    sd = np.where(zero, 1.0, sd)
    return ScalerModel(mean=mean, sd=sd, zero_variance=zero)


def apply_scaler(model: ScalerModel, rows: np.ndarray | TaggedRows) -> np.ndarray:
    X = np.asarray(_as_array(rows), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected rows with {model.n_features} features")
    return (X - model.mean) / model.sd


def invert_scaler(model: ScalerModel, rows: np.ndarray) -> np.ndarray:
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected rows with {model.n_features} features")
    return X * model.sd + model.mean

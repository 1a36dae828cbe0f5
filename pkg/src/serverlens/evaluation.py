"""Performance metrics (RMSE, R^2, MAPE, MAAPE) and permutation importance."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

#: observations with |y| at or below this count as zero-valued
ZERO_EPS = 1e-12


@dataclass(frozen=True)
class PredictionSet:
    y: np.ndarray
    yhat: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=np.float64)
        yhat = np.asarray(self.yhat, dtype=np.float64)
        if y.ndim != 1 or y.shape != yhat.shape or y.size < 1:
            raise ValueError("y and yhat must be equal-length non-empty vectors")
        if not (np.isfinite(y).all() and np.isfinite(yhat).all()):
            raise ValueError("metrics require finite observations and predictions")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "yhat", yhat)


def rmse(p: PredictionSet) -> float:
    return float(np.sqrt(np.mean((p.y - p.yhat) ** 2)))


def r_squared(p: PredictionSet) -> float:
    ss_tot = float(np.sum((p.y - p.y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined: observations are all equal")
    ss_res = float(np.sum((p.y - p.yhat) ** 2))
    return 1.0 - ss_res / ss_tot


def mape(p: PredictionSet) -> tuple[float | None, int]:
    """Mean |y-yhat|/|y| over observations with |y| > ZERO_EPS.

    Returns (value, excluded_count); value is None when every observation is
    zero-valued and the ratio is undefined everywhere.
    """
    keep = np.abs(p.y) > ZERO_EPS
    excluded = int((~keep).sum())
    if not keep.any():
        return None, excluded
    value = float(np.mean(np.abs((p.y[keep] - p.yhat[keep]) / p.y[keep])))
    return value, excluded


def maape(p: PredictionSet) -> float:
    """Mean arctan(|y-yhat|/|y|), bounded in [0, pi/2].

    Zero-valued observations take the arctan limit: pi/2 when the prediction
    errs there, 0 when it is also zero.
    """
    zero_y = np.abs(p.y) <= ZERO_EPS
    err = np.abs(p.y - p.yhat)
    terms = np.empty(p.y.size)
    nz = ~zero_y
    terms[nz] = np.arctan(err[nz] / np.abs(p.y[nz]))
    terms[zero_y] = np.where(err[zero_y] <= ZERO_EPS, 0.0, math.pi / 2.0)
    return float(terms.mean())


@dataclass(frozen=True)
class MetricsReport:
    """The four metrics over one prediction set.

    The percentage-style aggregates (mape, maape) are computed over the
    observations with |y| > ZERO_EPS; ``excluded_count`` reports how many
    zero-valued observations were left out of both.
    """

    rmse: float
    r2: float
    mape: float | None
    maape: float | None
    excluded_count: int

    def as_dict(self) -> dict[str, float | int | None]:
        return {
            "rmse": self.rmse,
            "r2": self.r2,
            "mape": self.mape,
            "maape": self.maape,
            "excluded_count": self.excluded_count,
        }


def compute_metrics(y: np.ndarray, yhat: np.ndarray) -> MetricsReport:
    p = PredictionSet(y, yhat)
    keep = np.abs(p.y) > ZERO_EPS
    excluded = int((~keep).sum())
    if keep.any():
        kept = PredictionSet(p.y[keep], p.yhat[keep])
        mape_val, _ = mape(kept)
        maape_val = maape(kept)
    else:
        mape_val = None
        maape_val = None
    return MetricsReport(
        rmse=rmse(p),
        r2=r_squared(p),
        mape=mape_val,
        maape=maape_val,
        excluded_count=excluded,
    )


@dataclass(frozen=True)
class ImportanceReport:
    """Mean and sd of the R^2 decrease per shuffled feature, plus a ranking."""

    feature_names: tuple[str, ...]
    mean_decrease: np.ndarray
    sd_decrease: np.ndarray
    baseline_r2: float
    repeats: int

    def ranking(self) -> list[tuple[str, float, float]]:
        order = np.argsort(-self.mean_decrease, kind="stable")
        return [
            (self.feature_names[j], float(self.mean_decrease[j]), float(self.sd_decrease[j]))
            for j in order
        ]


def permutation_importance(
    model,
    rows: np.ndarray,
    y: np.ndarray,
    repeats: int = 10,
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
) -> ImportanceReport:
    """R^2 decrease when one feature column is shuffled, repeated ``repeats``
    times with a fresh permutation per repeat (shared across features so the
    run is reproducible and column effects are compared on equal shuffles).
    The input rows are never modified.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    X = np.array(rows, dtype=np.float64, copy=True)
    yv = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    names = tuple(feature_names) if feature_names is not None else tuple(
        f"x{j}" for j in range(d)
    )
    if len(names) != d:
        raise ValueError("one feature name per column required")

    baseline = r_squared(PredictionSet(yv, model.predict(X)))
    rng = np.random.default_rng(seed)
    decreases = np.empty((repeats, d))
    for r in range(repeats):
        perm = rng.permutation(n)
        for j in range(d):
            saved = X[:, j].copy()
            X[:, j] = saved[perm]
            decreases[r, j] = baseline - r_squared(PredictionSet(yv, model.predict(X)))
            X[:, j] = saved
    return ImportanceReport(
        feature_names=names,
        mean_decrease=decreases.mean(axis=0),
        sd_decrease=decreases.std(axis=0),
        baseline_r2=baseline,
        repeats=repeats,
    )


def importance_to_csv(report: ImportanceReport) -> str:
    out = io.StringIO()
    out.write("feature,mean_r2_decrease,sd_r2_decrease\n")
    for name, mean, sd in report.ranking():
        out.write(f"{name},{mean!r},{sd!r}\n")
    return out.getvalue()


def metrics_to_csv(reports: dict[str, MetricsReport]) -> str:
    """One row per labeled prediction set (typically train/validation/test)."""
    out = io.StringIO()
    out.write("partition,rmse,r2,mape,maape,excluded_count\n")
    for label, rep in reports.items():
        mape_s = "" if rep.mape is None else repr(rep.mape)
        maape_s = "" if rep.maape is None else repr(rep.maape)
        out.write(f"{label},{rep.rmse!r},{rep.r2!r},{mape_s},{maape_s},{rep.excluded_count}\n")
    return out.getvalue()

"""Elastic-net linear regression, optionally on polynomial feature expansions.

The solver is cyclic coordinate descent with soft thresholding on centered
data (the intercept is never penalized).  The overall penalty strength is not
a searched hyperparameter: it is picked by validation RMSE from a fixed
logarithmic grid plus the unpenalized solution.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Mapping

import numpy as np

from .base import FitError, TrainedModel

#: lambda grid: 20 log-spaced points spanning [1e-5 * lambda_max, lambda_max],
#: plus the exact unpenalized solution as an extra candidate.
LAMBDA_GRID_SIZE = 20
LAMBDA_MIN_RATIO = 1e-5
RHO_FLOOR = 1e-3


def expand_polynomial(rows: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree <= degree, no bias column.

    Column order: the original features, then degree-2 products in
    lexicographic index order, and so on.  Degree 1 returns the input as-is.
    """
    if degree != int(degree) or not 1 <= degree <= 4:
        raise ValueError(f"polynomial degree must be an integer in 1..4, got {degree}")
    degree = int(degree)
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-D row matrix")
    if degree == 1:
        return X
    d = X.shape[1]
    cols = [X]
    for deg in range(2, degree + 1):
        for combo in combinations_with_replacement(range(d), deg):
            col = X[:, combo[0]].copy()
            for j in combo[1:]:
                col *= X[:, j]
            cols.append(col[:, None])
    return np.hstack(cols)


def n_polynomial_features(d: int, degree: int) -> int:
    from math import comb

    return comb(d + degree, degree) - 1


@dataclass(frozen=True)
class LinearModel(TrainedModel):
    coefficients: np.ndarray
    intercept: float
    degree: int
    n_features: int
    lam: float
    rho: float
    tag: str = "elastic_net"

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        Z = expand_polynomial(X, self.degree)
        return Z @ self.coefficients + self.intercept


def _soft(v: float, t: float) -> float:
    if v > t:
        return v - t
    if v < -t:
        return v + t
    return 0.0


def coordinate_descent(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    rho: float,
    tol: float = 1e-9,
    max_passes: int = 2000,
    warm_start: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Minimize (1/2n)||y - b0 - X b||^2 + lam (rho |b|_1 + (1-rho)/2 |b|_2^2).

    Returns (coefficients, intercept).  Works on centered copies of X and y,
    so the intercept is exact and unpenalized.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise FitError("elastic net requires finite inputs")
    n, d = X.shape
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    yc = y - y_mean
    col_sq = (Xc**2).sum(axis=0) / n

    beta = np.zeros(d) if warm_start is None else warm_start.copy()
    resid = yc - Xc @ beta
    l1 = lam * rho
    l2 = lam * (1.0 - rho)
    for _ in range(max_passes):
        max_delta = 0.0
        for j in range(d):
            if col_sq[j] == 0.0:
                continue
            old = beta[j]
            rho_j = (Xc[:, j] @ resid) / n + col_sq[j] * old
            new = _soft(rho_j, l1) / (col_sq[j] + l2)
            if new != old:
                resid += Xc[:, j] * (old - new)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta <= tol * max(1.0, float(np.abs(beta).max())):
            break
    intercept = y_mean - float(x_mean @ beta)
    return beta, intercept


def lambda_max(X: np.ndarray, y: np.ndarray, rho: float) -> float:
    """Smallest penalty zeroing all coefficients at full L1 mixing; the mixing
    value is floored at RHO_FLOOR inside this formula only."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    return float(np.abs(Xc.T @ yc).max() / (n * max(rho, RHO_FLOOR)))


def fit_elastic_net(
    train_X: np.ndarray,
    train_y: np.ndarray,
    val_X: np.ndarray,
    val_y: np.ndarray,
    hp: Mapping[str, float],
    seed: int = 0,
) -> LinearModel:
    """Fit at the searched mixing value (and polynomial degree, when present),
    choosing the penalty strength by validation RMSE.

    A fractional sampled degree is rounded half-up before expansion.
    """
    rho = float(hp["l1_ratio"])
    if not 0.0 <= rho <= 1.0:
        raise FitError(f"l1_ratio must be in [0, 1], got {rho}")
    degree = int(np.floor(float(hp.get("degree", 1)) + 0.5))
    degree = min(max(degree, 1), 4)

    Zt = expand_polynomial(np.asarray(train_X, dtype=np.float64), degree)
    Zv = expand_polynomial(np.asarray(val_X, dtype=np.float64), degree)
    yt = np.asarray(train_y, dtype=np.float64)
    yv = np.asarray(val_y, dtype=np.float64)

    lmax = lambda_max(Zt, yt, rho)
    if lmax == 0.0:
        grid = [0.0]
    else:
        grid = list(np.geomspace(lmax, LAMBDA_MIN_RATIO * lmax, LAMBDA_GRID_SIZE)) + [0.0]

    best: tuple[float, float, np.ndarray, float] | None = None
    warm: np.ndarray | None = None
    for lam in grid:  # largest first, warm-starting down the path
        beta, b0 = coordinate_descent(Zt, yt, lam, rho, warm_start=warm)
        warm = beta
        val_rmse = float(np.sqrt(np.mean((yv - (Zv @ beta + b0)) ** 2)))
        if best is None or val_rmse < best[0]:
            best = (val_rmse, lam, beta.copy(), b0)
    assert best is not None
    _, lam, beta, b0 = best
    return LinearModel(
        coefficients=beta,
        intercept=b0,
        degree=degree,
        n_features=int(np.asarray(train_X).shape[1]),
        lam=lam,
        rho=rho,
        tag="elastic_net" if degree == 1 else "elastic_net_poly",
    )

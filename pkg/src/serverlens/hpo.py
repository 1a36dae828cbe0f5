"""Bayesian hyperparameter optimization: GP surrogate + expected improvement.

Search dimensions are encoded to the unit hypercube (one-hot blocks for
categorical choices); the surrogate is a dense radial-basis GP with white
noise fit by marginal-likelihood gradient ascent on standardized objective
values.  Proposals maximize expected improvement over a fresh batch of 1024
random candidate encodings, which keeps the acquisition well-defined across
the integer and categorical dimensions.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

N_CANDIDATES = 1024
DEFAULT_BUDGET = 50
DEFAULT_N_INIT = 10

HyperParams = dict[str, float | int | str]


class HpoError(RuntimeError):
    def __init__(self, message: str, history: "TrialHistory | None" = None) -> None:
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# Parameter kinds and search spaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContinuousUniform:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise ValueError("lo must be <= hi")


@dataclass(frozen=True)
class IntegerUniform:
    lo: int
    hi: int

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise ValueError("lo must be <= hi")


@dataclass(frozen=True)
class LogUniform:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not 0 < self.lo <= self.hi:
            raise ValueError("log-uniform bounds must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class Categorical:
    options: tuple[str, ...]  # equal probability

    def __post_init__(self) -> None:
        if not self.options:
            raise ValueError("categorical options must be non-empty")


ParamKind = ContinuousUniform | IntegerUniform | LogUniform | Categorical


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: ParamKind


@dataclass(frozen=True)
class SearchSpace:
    learner: str
    params: tuple[ParamSpec, ...]

    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    def validate(self, hp: Mapping[str, float | int | str]) -> None:
        if set(hp) != set(self.names()):
            raise ValueError(
                f"{self.learner}: hyperparameters {sorted(hp)} do not match "
                f"search dimensions {sorted(self.names())}"
            )
        for p in self.params:
            v = hp[p.name]
            k = p.kind
            if isinstance(k, Categorical):
                if v not in k.options:
                    raise ValueError(f"{p.name}: {v!r} not in {k.options}")
            elif isinstance(k, IntegerUniform):
                if not (float(v) == int(v) and k.lo <= int(v) <= k.hi):
                    raise ValueError(f"{p.name}: {v!r} outside integer range [{k.lo}, {k.hi}]")
            else:
                if not (k.lo <= float(v) <= k.hi):
                    raise ValueError(f"{p.name}: {v!r} outside [{k.lo}, {k.hi}]")

    def to_table(self) -> list[dict]:
        """Primitive description, pinned by a golden test."""
        rows = []
        for p in self.params:
            k = p.kind
            row: dict = {"learner": self.learner, "name": p.name, "kind": type(k).__name__}
            if isinstance(k, Categorical):
                row["options"] = list(k.options)
            else:
                row["lo"] = k.lo
                row["hi"] = k.hi
            rows.append(row)
        return rows


GP_KERNEL_OPTIONS = ("rbf", "matern12", "matern32", "matern52")

SEARCH_SPACES: dict[str, SearchSpace] = {
    "elastic_net": SearchSpace(
        "elastic_net",
        (ParamSpec("l1_ratio", ContinuousUniform(0.0, 1.0)),),
    ),
    "elastic_net_poly": SearchSpace(
        "elastic_net_poly",
        (
            ParamSpec("l1_ratio", ContinuousUniform(0.0, 1.0)),
            ParamSpec("degree", ContinuousUniform(1.0, 4.0)),
        ),
    ),
    "gp": SearchSpace(
        "gp",
        (
            ParamSpec("n_inducing", IntegerUniform(30, 256)),
            ParamSpec("kernel", Categorical(GP_KERNEL_OPTIONS)),
            ParamSpec("learning_rate", LogUniform(1e-5, 1.0)),
        ),
    ),
    "gbt": SearchSpace(
        "gbt",
        (
            ParamSpec("colsample_bytree", ContinuousUniform(0.0, 1.0)),
            ParamSpec("subsample", ContinuousUniform(0.0, 1.0)),
            ParamSpec("max_depth", IntegerUniform(1, 10)),
            ParamSpec("n_rounds", IntegerUniform(1000, 20000)),
            ParamSpec("reg_alpha", ContinuousUniform(0.0, 1e3)),
            ParamSpec("reg_lambda", ContinuousUniform(0.0, 1e3)),
            ParamSpec("learning_rate", LogUniform(1e-5, 1.0)),
        ),
    ),
    "rf": SearchSpace(
        "rf",
        (
            ParamSpec("colsample_bytree", ContinuousUniform(0.0, 1.0)),
            ParamSpec("colsample_bylevel", ContinuousUniform(0.0, 1.0)),
            ParamSpec("colsample_bynode", ContinuousUniform(0.0, 1.0)),
            ParamSpec("max_depth", IntegerUniform(1, 10)),
            ParamSpec("n_trees", IntegerUniform(1000, 2000)),
            ParamSpec("reg_alpha", ContinuousUniform(0.0, 1e3)),
            ParamSpec("reg_lambda", ContinuousUniform(0.0, 1e3)),
            ParamSpec("learning_rate", LogUniform(1e-5, 1.0)),
        ),
    ),
    "ffn": SearchSpace(
        "ffn",
        (
            ParamSpec("hidden_layers", IntegerUniform(0, 5)),
            ParamSpec("hidden_nodes", IntegerUniform(10, 200)),
            ParamSpec("dropout", ContinuousUniform(0.05, 0.3)),
            ParamSpec("learning_rate", LogUniform(1e-5, 1.0)),
        ),
    ),
}


# ---------------------------------------------------------------------------
# Sampling and encoding
# ---------------------------------------------------------------------------


def sample_hyperparams(space: SearchSpace, n: int, seed: int) -> list[HyperParams]:
    """n independent draws, each dimension per its declared distribution;
    integer bounds are inclusive on both ends."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out: list[HyperParams] = []
    for _ in range(n):
        hp: HyperParams = {}
        for p in space.params:
            k = p.kind
            if isinstance(k, ContinuousUniform):
                hp[p.name] = k.lo if k.lo == k.hi else float(rng.uniform(k.lo, k.hi))
            elif isinstance(k, IntegerUniform):
                hp[p.name] = int(rng.integers(k.lo, k.hi + 1))
            elif isinstance(k, LogUniform):
                hp[p.name] = float(math.exp(rng.uniform(math.log(k.lo), math.log(k.hi))))
            else:
                hp[p.name] = k.options[int(rng.integers(len(k.options)))]
        out.append(hp)
    return out


def encoded_dim(space: SearchSpace) -> int:
    return sum(
        len(p.kind.options) if isinstance(p.kind, Categorical) else 1 for p in space.params
    )


def encode(space: SearchSpace, hp: Mapping[str, float | int | str]) -> np.ndarray:
    """Map one hyperparameter set to [0, 1]^D (one-hot blocks for categories)."""
    space.validate(hp)
    parts: list[float] = []
    for p in space.params:
        k = p.kind
        v = hp[p.name]
        if isinstance(k, Categorical):
            block = [0.0] * len(k.options)
            block[k.options.index(v)] = 1.0
            parts.extend(block)
        elif isinstance(k, LogUniform):
            span = math.log(k.hi) - math.log(k.lo)
            parts.append(0.0 if span == 0 else (math.log(float(v)) - math.log(k.lo)) / span)
        else:
            span = float(k.hi) - float(k.lo)
            parts.append(0.0 if span == 0 else (float(v) - float(k.lo)) / span)
    return np.array(parts, dtype=np.float64)


def decode(space: SearchSpace, vec: np.ndarray) -> HyperParams:
    """Inverse of ``encode`` up to integer rounding (half-up) and one-hot argmax."""
    hp: HyperParams = {}
    i = 0
    for p in space.params:
        k = p.kind
        if isinstance(k, Categorical):
            block = vec[i : i + len(k.options)]
            hp[p.name] = k.options[int(np.argmax(block))]
            i += len(k.options)
            continue
        t = float(vec[i])
        i += 1
        if isinstance(k, LogUniform):
            hp[p.name] = float(math.exp(math.log(k.lo) + t * (math.log(k.hi) - math.log(k.lo))))
        elif isinstance(k, IntegerUniform):
            raw = k.lo + t * (k.hi - k.lo)
            hp[p.name] = int(min(max(math.floor(raw + 0.5), k.lo), k.hi))
        else:
            hp[p.name] = float(k.lo + t * (k.hi - k.lo))
    return hp


# ---------------------------------------------------------------------------
# Expected improvement (minimization form)
# ---------------------------------------------------------------------------


def expected_improvement(
    mu: float | np.ndarray, sd: float | np.ndarray, best: float
) -> float | np.ndarray:
    """EI = (y*-mu) Phi(z) + sd phi(z), z = (y*-mu)/sd; max(0, y*-mu) at sd=0."""
    mu_arr = np.asarray(mu, dtype=np.float64)
    sd_arr = np.asarray(sd, dtype=np.float64)
    if np.any(sd_arr < 0):
        raise ValueError("sd must be >= 0")
    improvement = best - mu_arr
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd_arr > 0, improvement / np.where(sd_arr > 0, sd_arr, 1.0), 0.0)
    phi = np.exp(-0.5 * z**2) / math.sqrt(2.0 * math.pi)
    ei = np.where(sd_arr > 0, improvement * ndtr(z) + sd_arr * phi, np.maximum(improvement, 0.0))
    return float(ei) if np.isscalar(mu) or mu_arr.ndim == 0 else ei


# ---------------------------------------------------------------------------
# Dense GP surrogate (radial-basis + white noise)
# ---------------------------------------------------------------------------


@dataclass
class _Surrogate:
    X: np.ndarray
    y: np.ndarray
    log_ell: float
    log_sf2: float
    log_sn: float
    chol: np.ndarray = field(init=False)
    alpha: np.ndarray = field(init=False)

    _ITERS = 100
    _STEP = 0.05
    _JITTER = 1e-10

    @staticmethod
    def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return np.maximum(
            (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2.0 * A @ B.T, 0.0
        )

    def _gram(self, D2: np.ndarray, ell: float, sf2: float) -> np.ndarray:
        return sf2 * np.exp(-0.5 * D2 / (ell * ell))

    def _lml_and_grad(self, theta: np.ndarray, D2: np.ndarray) -> tuple[float, np.ndarray]:
        n = self.y.size
        ell, sf2, sn = (math.exp(v) for v in theta)
        K = self._gram(D2, ell, sf2) + (sn + self._JITTER) * np.eye(n)
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            return -math.inf, np.zeros(3)
        alpha = np.linalg.solve(L.T, np.linalg.solve(L, self.y))
        lml = (
            -0.5 * float(self.y @ alpha)
            - float(np.log(np.diag(L)).sum())
            - 0.5 * n * math.log(2 * math.pi)
        )
        Kinv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(n)))
        middle = np.outer(alpha, alpha) - Kinv
        base = self._gram(D2, ell, sf2)
        grads = np.array(
            [
                0.5 * float((middle * (base * D2 / ell**2)).sum()),
                0.5 * float((middle * base).sum()),
                0.5 * float(np.trace(middle)) * sn,
            ]
        )
        return lml, grads

    def fit(self) -> "_Surrogate":
        D2 = self._sq_dists(self.X, self.X)
        theta = np.array([self.log_ell, self.log_sf2, self.log_sn])
        best = theta.copy()
        best_lml = -math.inf
        for _ in range(self._ITERS):
            lml, grad = self._lml_and_grad(theta, D2)
            if lml > best_lml:
                best_lml = lml
                best = theta.copy()
            theta = np.clip(theta + self._STEP * np.clip(grad, -5.0, 5.0), -15.0, 15.0)
        lml, _ = self._lml_and_grad(theta, D2)
        if lml > best_lml:
            best = theta.copy()
        self.log_ell, self.log_sf2, self.log_sn = (float(v) for v in best)
        ell, sf2, sn = (math.exp(v) for v in best)
        K = self._gram(D2, ell, sf2) + (sn + self._JITTER) * np.eye(self.y.size)
        self.chol = np.linalg.cholesky(K)
        self.alpha = np.linalg.solve(self.chol.T, np.linalg.solve(self.chol, self.y))
        return self

    def predict(self, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ell, sf2 = math.exp(self.log_ell), math.exp(self.log_sf2)
        Ks = self._gram(self._sq_dists(Xs, self.X), ell, sf2)
        mu = Ks @ self.alpha
        v = np.linalg.solve(self.chol, Ks.T)
        var = np.maximum(sf2 - (v**2).sum(axis=0), 0.0)
        return mu, np.sqrt(var)


def _fit_surrogate(X: np.ndarray, y: np.ndarray) -> _Surrogate:
    d2 = _Surrogate._sq_dists(X, X)
    off = d2[~np.eye(len(y), dtype=bool)]
    med = float(np.median(off[off > 0])) if np.any(off > 0) else 1.0
    return _Surrogate(
        X=X,
        y=y,
        log_ell=0.5 * math.log(max(med, 1e-6)),
        log_sf2=0.0,
        log_sn=math.log(1e-2),
    ).fit()


# ---------------------------------------------------------------------------
# The optimization loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    index: int
    hp: HyperParams
    value: float | None  # objective (lower better); None while unscored
    failed: bool
    wall_time: float


@dataclass
class TrialHistory:
    trials: list[Trial] = field(default_factory=list)

    def successful(self) -> list[Trial]:
        return [t for t in self.trials if not t.failed]

    @property
    def best_index(self) -> int:
        ok = self.successful()
        if not ok:
            raise HpoError("no successful trials", self)
        best = min(ok, key=lambda t: t.value)
        return best.index

    @property
    def best_value(self) -> float:
        return self.trials[self.best_index].value  # type: ignore[return-value]

    @property
    def best_hp(self) -> HyperParams:
        return dict(self.trials[self.best_index].hp)

    def best_so_far(self) -> list[float]:
        out: list[float] = []
        cur = math.inf
        for t in self.trials:
            if not t.failed and t.value is not None:
                cur = min(cur, t.value)
            out.append(cur)
        return out

    def to_log(self) -> str:
        import json

        lines = []
        for t in self.trials:
            status = "failed" if t.failed else f"{t.value!r}"
            lines.append(f"{t.index}\t{json.dumps(t.hp, sort_keys=True)}\t{status}\t{t.wall_time:.3f}")
        return "\n".join(lines) + ("\n" if lines else "")


def _candidate_seed(seed: int, step: int) -> int:
    import hashlib

    digest = hashlib.sha256(f"{seed}/candidates/{step}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def bayes_optimize(
    objective: Callable[[HyperParams], float],
    space: SearchSpace,
    budget: int = DEFAULT_BUDGET,
    n_init: int = DEFAULT_N_INIT,
    seed: int = 0,
) -> tuple[HyperParams, TrialHistory]:
    """Minimize ``objective`` over ``space`` within ``budget`` evaluations.

    The first ``n_init`` points are random; afterwards each proposal fits the
    surrogate to all scored trials (failures penalized at worst-observed + 1)
    and takes the EI argmax over fresh random candidates.  Raising or
    returning a non-finite value marks a trial failed; the run errs only when
    every trial failed.
    """
    if not budget >= n_init >= 2:
        raise ValueError("need budget >= n_init >= 2")
    history = TrialHistory()

    def run_trial(index: int, hp: HyperParams) -> None:
        start = time.perf_counter()
        try:
            value = float(objective(hp))
            failed = not math.isfinite(value)
        except Exception:
            value = math.nan
            failed = True
        history.trials.append(
            Trial(
                index=index,
                hp=dict(hp),
                value=None if failed else value,
                failed=failed,
                wall_time=time.perf_counter() - start,
            )
        )

    for i, hp in enumerate(sample_hyperparams(space, n_init, _candidate_seed(seed, -1))):
        run_trial(i, hp)

    for step in range(n_init, budget):
        candidates = sample_hyperparams(space, N_CANDIDATES, _candidate_seed(seed, step))
        ok = history.successful()
        if not ok:
            proposal = candidates[0]
        else:
            values = np.array([t.value for t in ok])
            worst = float(values.max())
            ys = np.array(
                [t.value if not t.failed else worst + 1.0 for t in history.trials],
                dtype=np.float64,
            )
            mean, std = float(ys.mean()), float(ys.std())
            if std == 0.0:
                std = 1.0
            ys_std = (ys - mean) / std
            Xenc = np.stack([encode(space, t.hp) for t in history.trials])
            surrogate = _fit_surrogate(Xenc, ys_std)
            Cenc = np.stack([encode(space, hp) for hp in candidates])
            mu, sd = surrogate.predict(Cenc)
            best_std = float(ys_std.min())
            ei = expected_improvement(mu, sd, best_std)
            proposal = candidates[int(np.argmax(ei))]
        run_trial(step, proposal)

    if not history.successful():
        raise HpoError(f"all {budget} trials failed", history)
    return history.best_hp, history

"""End-to-end orchestration: preprocess, tune, select, persist, and probe.

The training run mirrors the modeling flow end to end: server-atomic split,
imputer and scaler fit on the training partition only, per-learner Bayesian
tuning against validation RMSE, refit at the best point, metric reports on
all three partitions, and winner selection.  Prospective backtests reuse one
training per baseline year and evaluate each horizon's test servers against
it.  The efficiency identity (level * max-throughput / power) is checked as a
cross-bundle diagnostic, never trained on.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Mapping, Sequence

import numpy as np

from . import hpo
from .bundle import (
    FORMAT_VERSION,
    Leaderboard,
    LearnerEntry,
    ModelBundle,
    load_bundle,
    save_bundle,
)
from .dataset import (
    BASE_FEATURES,
    LEVELS,
    DesignMatrix,
    Diagnostic,
    FeatureSchema,
    ServerRecord,
    TargetKind,
    build_design_matrix,
    record_features,
    write_canonical_csv,
)
from .evaluation import (
    ImportanceReport,
    MetricsReport,
    compute_metrics,
    permutation_importance,
)
from .learners import (
    LEARNER_ORDER,
    FitError,
    TrainedModel,
    fit_elastic_net,
    fit_ffn,
    fit_gbt,
    fit_gp,
    fit_random_forest,
)
from .preprocess import (
    ImputerModel,
    ScalerModel,
    TaggedRows,
    apply_imputer,
    apply_scaler,
    fit_imputer,
    fit_scaler,
)
from .split import SplitIndices, SplitScheme, random_server_split, time_series_split

__all__ = [
    "Profile",
    "PROFILES",
    "PipelineConfig",
    "PipelineError",
    "child_seed",
    "run_training",
    "select_best",
    "consistency_check_eq1",
    "prospective_experiment",
    "predict_targets",
    "save_bundle",
    "load_bundle",
    "leaderboard_to_csv",
    "ProspectiveGrid",
    "Eq1Report",
    "PredictionCurves",
]


class PipelineError(RuntimeError):
    pass


def child_seed(master: int, label: str) -> int:
    """Deterministic fan-out of the master seed: one child per purpose label."""
    digest = hashlib.sha256(f"{master}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


@dataclass(frozen=True)
class Profile:
    """Run-scale caps.  The desk profile keeps full tuning on commodity
    hardware; the full profile honors the search ranges uncapped."""

    name: str
    bo_budget: int
    bo_n_init: int
    gbt_rounds_cap: int | None
    rf_trees_cap: int | None
    gp_rows_cap: int | None


PROFILES: dict[str, Profile] = {
    "desk": Profile("desk", bo_budget=25, bo_n_init=10, gbt_rounds_cap=2000,
                    rf_trees_cap=1000, gp_rows_cap=4000),
    "full": Profile("full", bo_budget=50, bo_n_init=10, gbt_rounds_cap=None,
                    rf_trees_cap=None, gp_rows_cap=None),
}

ALL_LEARNERS = LEARNER_ORDER


@dataclass(frozen=True)
class PipelineConfig:
    target_kind: TargetKind
    master_seed: int = 0
    scheme: SplitScheme = SplitScheme.RANDOM_BY_SERVER
    baseline_year: int | None = None  # time-series scheme only
    horizon: int = 1
    imputer_k: int = 5
    learners: tuple[str, ...] = ALL_LEARNERS
    profile: str = "desk"
    bo_budget: int | None = None   # override profile defaults when set
    bo_n_init: int | None = None
    select_on: str = "test"        # "test" (as published) or "validation"
    importance_repeats: int = 10

    def __post_init__(self) -> None:
        if not self.learners:
            raise PipelineError("at least one learner must be enabled")
        unknown = set(self.learners) - set(ALL_LEARNERS)
        if unknown:
            raise PipelineError(f"unknown learners: {sorted(unknown)}")
        if self.profile not in PROFILES:
            raise PipelineError(f"unknown profile {self.profile!r}")
        if self.select_on not in ("test", "validation"):
            raise PipelineError("select_on must be 'test' or 'validation'")

    def resolved_profile(self) -> Profile:
        p = PROFILES[self.profile]
        if self.bo_budget is not None or self.bo_n_init is not None:
            p = replace(
                p,
                bo_budget=self.bo_budget if self.bo_budget is not None else p.bo_budget,
                bo_n_init=self.bo_n_init if self.bo_n_init is not None else p.bo_n_init,
            )
        return p


_FITTERS: dict[str, Callable] = {
    "elastic_net": fit_elastic_net,
    "elastic_net_poly": fit_elastic_net,
    "gp": fit_gp,
    "gbt": fit_gbt,
    "rf": fit_random_forest,
    "ffn": fit_ffn,
}


def _clamp_hp(tag: str, hp: hpo.HyperParams, profile: Profile) -> hpo.HyperParams:
    hp = dict(hp)
    if tag == "gbt" and profile.gbt_rounds_cap is not None:
        hp["n_rounds"] = min(int(hp["n_rounds"]), profile.gbt_rounds_cap)
    if tag == "rf" and profile.rf_trees_cap is not None:
        hp["n_trees"] = min(int(hp["n_trees"]), profile.rf_trees_cap)
    return hp


@dataclass(frozen=True)
class _Prepared:
    """Partitioned, imputed, scaled views of one design matrix."""

    matrix: DesignMatrix
    split: SplitIndices
    imputer: ImputerModel
    scaler: ScalerModel
    X: dict[str, np.ndarray]   # scaled complete rows per partition
    y: dict[str, np.ndarray]
    feature_stats: dict[str, dict[str, float]]
    diagnostics: list[Diagnostic]


def _prepare(matrix: DesignMatrix, split: SplitIndices, k: int) -> _Prepared:
    diagnostics: list[Diagnostic] = []
    raw = {name: matrix.X[idx] for name, idx in split.partition_of().items()}
    ys = {name: matrix.y[idx] for name, idx in split.partition_of().items()}

    train_rows = TaggedRows(raw["train"], "train")
    k_eff = min(k, raw["train"].shape[0])
    imputer = fit_imputer(train_rows, k_eff, feature_names=matrix.schema.names)
    scaled: dict[str, np.ndarray] = {}
    train_imputed, diags = apply_imputer(imputer, train_rows)
    diagnostics.extend(diags)
    scaler = fit_scaler(TaggedRows(train_imputed, "train"))
    scaled["train"] = apply_scaler(scaler, train_imputed)
    for name in ("validation", "test"):
        if raw[name].shape[0] == 0:
            scaled[name] = raw[name].copy()
            continue
        imputed, diags = apply_imputer(imputer, raw[name])
        diagnostics.extend(diags)
        scaled[name] = apply_scaler(scaler, imputed)

    stats: dict[str, dict[str, float]] = {}
    for j, name in enumerate(matrix.schema.names):
        col = raw["train"][:, j]
        observed = col[~np.isnan(col)]
        stats[name] = {
            "observed_min": float(observed.min()) if observed.size else math.nan,
            "observed_max": float(observed.max()) if observed.size else math.nan,
            "observed_mean": float(observed.mean()) if observed.size else math.nan,
        }
    return _Prepared(
        matrix=matrix,
        split=split,
        imputer=imputer,
        scaler=scaler,
        X=scaled,
        y=ys,
        feature_stats=stats,
        diagnostics=diagnostics,
    )


def _fit_with_profile(
    tag: str,
    prepared: _Prepared,
    hp: hpo.HyperParams,
    profile: Profile,
    master_seed: int,
    target: TargetKind,
) -> TrainedModel:
    hp_run = _clamp_hp(tag, hp, profile)
    fit_seed = child_seed(
        master_seed, f"fit/{target.value}/{tag}/{json.dumps(hp_run, sort_keys=True)}"
    )
    Xtr, ytr = prepared.X["train"], prepared.y["train"]
    if tag == "gp" and profile.gp_rows_cap is not None and Xtr.shape[0] > profile.gp_rows_cap:
        rng = np.random.default_rng(child_seed(master_seed, f"gpcap/{target.value}"))
        keep = np.sort(rng.choice(Xtr.shape[0], size=profile.gp_rows_cap, replace=False))
        Xtr, ytr = Xtr[keep], ytr[keep]
    if tag == "gp":
        hp_run = dict(hp_run)
        hp_run["n_inducing"] = min(int(hp_run["n_inducing"]), Xtr.shape[0])
    fitter = _FITTERS[tag]
    return fitter(Xtr, ytr, prepared.X["validation"], prepared.y["validation"], hp_run, seed=fit_seed)


def _tune_learner(
    tag: str,
    prepared: _Prepared,
    config: PipelineConfig,
    profile: Profile,
) -> tuple[LearnerEntry, TrainedModel | None]:
    space = hpo.SEARCH_SPACES[tag]
    yval = prepared.y["validation"]

    def objective(hp: hpo.HyperParams) -> float:
        model = _fit_with_profile(tag, prepared, hp, profile, config.master_seed, config.target_kind)
        pred = model.predict(prepared.X["validation"])
        return float(np.sqrt(np.mean((yval - pred) ** 2)))

    try:
        best_hp, history = hpo.bayes_optimize(
            objective,
            space,
            budget=profile.bo_budget,
            n_init=profile.bo_n_init,
            seed=child_seed(config.master_seed, f"bo/{config.target_kind.value}/{tag}"),
        )
    except hpo.HpoError:
        entry = LearnerEntry(tag=tag, status="failed", best_hp={}, metrics={},
                             n_trials=profile.bo_budget, best_objective=None)
        return entry, None

    model = _fit_with_profile(tag, prepared, best_hp, profile, config.master_seed, config.target_kind)
    metrics = {}
    for name in ("train", "validation", "test"):
        if prepared.y[name].size == 0:
            continue
        metrics[name] = compute_metrics(prepared.y[name], model.predict(prepared.X[name]))
    entry = LearnerEntry(
        tag=tag,
        status="ok",
        best_hp=dict(best_hp),
        metrics=metrics,
        n_trials=len(history.trials),
        best_objective=history.best_value,
    )
    return entry, model


def select_best(leaderboard: Leaderboard, on: str = "test") -> str:
    """Lowest MAAPE on the selection partition; ties broken by RMSE there,
    then by the fixed learner order."""
    best_tag: str | None = None
    best_key: tuple[float, float, int] | None = None
    for entry in leaderboard.successful():
        m = entry.metrics.get(on)
        if m is None:
            continue
        maape_v = math.inf if m.maape is None else m.maape
        key = (maape_v, m.rmse, LEARNER_ORDER.index(entry.tag))
        if best_key is None or key < best_key:
            best_key = key
            best_tag = entry.tag
    if best_tag is None:
        raise PipelineError("no successful learner to select from")
    return best_tag


def run_training(
    records: Sequence[ServerRecord], config: PipelineConfig
) -> tuple[Leaderboard, ModelBundle]:
    """Train every enabled learner for one target and bundle the winner."""
    if not records:
        raise PipelineError("no records to train on")
    matrix, diags = build_design_matrix(records, config.target_kind)
    split = _make_split(matrix, config)
    return _train_on_split(records, matrix, split, config, diags)


def _make_split(matrix: DesignMatrix, config: PipelineConfig) -> SplitIndices:
    if config.scheme is SplitScheme.RANDOM_BY_SERVER:
        return random_server_split(matrix, child_seed(config.master_seed, "split"))
    if config.baseline_year is None:
        raise PipelineError("time-series scheme needs a baseline_year")
    return time_series_split(matrix, config.baseline_year, config.horizon)


def _train_on_split(
    records: Sequence[ServerRecord],
    matrix: DesignMatrix,
    split: SplitIndices,
    config: PipelineConfig,
    diags: list[Diagnostic],
) -> tuple[Leaderboard, ModelBundle]:
    profile = config.resolved_profile()
    prepared = _prepare(matrix, split, config.imputer_k)

    entries: list[LearnerEntry] = []
    models: dict[str, TrainedModel] = {}
    for tag in config.learners:
        entry, model = _tune_learner(tag, prepared, config, profile)
        entries.append(entry)
        if model is not None:
            models[entry.tag] = model
    leaderboard = Leaderboard(entries=tuple(entries))
    if not leaderboard.successful():
        raise PipelineError("every enabled learner failed")

    select_partition = config.select_on if prepared.y[config.select_on].size else "validation"
    winner = select_best(leaderboard, on=select_partition)
    model = models[winner]

    importance: ImportanceReport | None = None
    if prepared.y["test"].size:
        try:
            importance = permutation_importance(
                model,
                prepared.X["test"],
                prepared.y["test"],
                repeats=config.importance_repeats,
                seed=child_seed(config.master_seed, f"importance/{config.target_kind.value}"),
                feature_names=matrix.schema.names,
            )
        except ValueError:
            importance = None  # constant test targets; importance undefined

    bundle = ModelBundle(
        format_version=FORMAT_VERSION,
        target_kind=config.target_kind,
        schema=matrix.schema,
        imputer=prepared.imputer,
        scaler=prepared.scaler,
        model=model,
        learner_tag=winner,
        hyperparams=leaderboard.entry(winner).best_hp,
        leaderboard=leaderboard,
        feature_stats=prepared.feature_stats,
        importance=importance,
        provenance={
            "data_fingerprint": data_fingerprint(records),
            "master_seed": config.master_seed,
            "profile": profile.name,
            "bo_budget": profile.bo_budget,
            "scheme": split.scheme.value,
            "split_metadata": dict(split.metadata),
            "n_servers": len(matrix.server_ids()),
            "selected_on": select_partition,
            "created": datetime.now(timezone.utc).isoformat(),
            "diagnostics": [str(d) for d in diags],
        },
    )
    return leaderboard, bundle


def data_fingerprint(records: Sequence[ServerRecord]) -> str:
    return hashlib.sha256(write_canonical_csv(records).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Efficiency-identity diagnostic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Eq1Cell:
    config_index: int
    level: float
    perf_direct: float
    composed: float
    residual: float
    relative: float | None  # None when the power prediction was non-positive


@dataclass(frozen=True)
class Eq1Report:
    cells: tuple[Eq1Cell, ...]
    median_relative: float
    p95_relative: float
    n_flagged: int  # cells with non-positive predicted power, excluded


def consistency_check_eq1(
    bundle_power: ModelBundle,
    bundle_throughput: ModelBundle,
    bundle_perf: ModelBundle,
    configs: Sequence[Mapping[str, float | str | None]],
    levels: Sequence[float] = LEVELS,
) -> Eq1Report:
    """Compare direct efficiency predictions against level * Th / P.

    At level 0 the composed value is exactly 0.  Relative residuals are taken
    against max(|direct|, 1e-12); cells with non-positive predicted power are
    flagged and excluded from the relative statistics.
    """
    bundles = {
        TargetKind.POWER: bundle_power,
        TargetKind.MAX_THROUGHPUT: bundle_throughput,
        TargetKind.PERF_TO_POWER: bundle_perf,
    }
    cells: list[Eq1Cell] = []
    relatives: list[float] = []
    n_flagged = 0
    for ci, config in enumerate(configs):
        curves = predict_targets(bundles, config)
        for li, level in enumerate(levels):
            p = curves.power_curve[li]
            perf = curves.perf_curve[li]
            composed = 0.0 if level == 0.0 else level * curves.max_throughput / p
            residual = abs(perf - composed)
            if p <= 0.0:
                n_flagged += 1
                cells.append(Eq1Cell(ci, level, perf, composed, residual, None))
                continue
            rel = residual / max(abs(perf), 1e-12)
            relatives.append(rel)
            cells.append(Eq1Cell(ci, level, perf, composed, residual, rel))
    if not relatives:
        raise PipelineError("every cell was flagged; no relative statistics")
    rel_arr = np.array(relatives)
    return Eq1Report(
        cells=tuple(cells),
        median_relative=float(np.median(rel_arr)),
        p95_relative=float(np.percentile(rel_arr, 95)),
        n_flagged=n_flagged,
    )


# ---------------------------------------------------------------------------
# Prospective backtesting grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProspectiveGrid:
    """(baseline_year, horizon) -> test metrics, or None for empty test years."""

    cells: dict[tuple[int, int], MetricsReport | None]
    winner_tags: dict[int, str]  # per baseline

    def horizon_means(self) -> dict[int, float | None]:
        """Unweighted per-horizon mean of test MAAPE over populated cells."""
        by_h: dict[int, list[float]] = {}
        for (_, h), report in self.cells.items():
            if report is not None and report.maape is not None:
                by_h.setdefault(h, []).append(report.maape)
        horizons = sorted({h for (_, h) in self.cells})
        return {h: (float(np.mean(by_h[h])) if h in by_h else None) for h in horizons}

    def to_csv(self) -> str:
        lines = ["baseline_year,horizon,status,rmse,r2,mape,maape,excluded_count"]
        for (b, h) in sorted(self.cells):
            rep = self.cells[(b, h)]
            if rep is None:
                lines.append(f"{b},{h},empty,,,,,")
            else:
                mape_s = "" if rep.mape is None else repr(rep.mape)
                maape_s = "" if rep.maape is None else repr(rep.maape)
                lines.append(
                    f"{b},{h},ok,{rep.rmse!r},{rep.r2!r},{mape_s},{maape_s},{rep.excluded_count}"
                )
        for h, mean in self.horizon_means().items():
            lines.append(f"mean,{h},{'ok' if mean is not None else 'empty'},,,,"
                         f"{'' if mean is None else repr(mean)},")
        return "\n".join(lines) + "\n"


def prospective_experiment(
    records: Sequence[ServerRecord],
    config: PipelineConfig,
    baseline_years: Sequence[int],
    horizons: Sequence[int] = (1, 2, 3, 4, 5),
) -> ProspectiveGrid:
    """Backtest over every (baseline, horizon) combination.

    Training and validation depend only on the baseline year, so each
    baseline is trained once and every horizon's test servers are evaluated
    against that same winner; cells without test servers carry an empty
    marker rather than zeros.
    """
    matrix, diags = build_design_matrix(records, config.target_kind)
    cells: dict[tuple[int, int], MetricsReport | None] = {}
    winners: dict[int, str] = {}
    for baseline in baseline_years:
        try:
            base_split = time_series_split(matrix, baseline, 1)
        except Exception:
            continue  # no pre-baseline servers; baseline unusable
        cfg = replace(config, scheme=SplitScheme.TIME_SERIES, baseline_year=baseline, horizon=1)
        try:
            _, bundle = _train_on_split(records, matrix, base_split, cfg, list(diags))
        except PipelineError:
            continue
        winners[baseline] = bundle.learner_tag
        for horizon in horizons:
            split_h = time_series_split(matrix, baseline, horizon)
            if split_h.empty_test:
                cells[(baseline, horizon)] = None
                continue
            rows = matrix.X[split_h.test]
            y = matrix.y[split_h.test]
            imputed, _ = apply_imputer(bundle.imputer, rows)
            scaled = apply_scaler(bundle.scaler, imputed)
            try:
                cells[(baseline, horizon)] = compute_metrics(y, bundle.model.predict(scaled))
            except ValueError:
                cells[(baseline, horizon)] = None  # degenerate test targets
    if not cells:
        raise PipelineError("no prospective cell could be evaluated")
    return ProspectiveGrid(cells=cells, winner_tags=winners)


# ---------------------------------------------------------------------------
# Prediction curves for arbitrary configurations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionCurves:
    levels: tuple[float, ...]
    power_curve: tuple[float, ...]
    perf_curve: tuple[float, ...]
    eq1_curve: tuple[float, ...]
    max_throughput: float
    imputed_features: tuple[str, ...]
    flags: tuple[str, ...]
    learner_tags: dict[str, str]


def config_to_features(config: Mapping[str, float | str | None]) -> np.ndarray:
    """Feature dict (BASE_FEATURES names, or a DDT convenience key) -> vector."""
    values = dict(config)
    ddt = values.pop("DDT", None)
    unknown = set(values) - set(BASE_FEATURES)
    if unknown:
        raise ValueError(f"unknown feature(s): {sorted(unknown)}")
    vec = np.full(len(BASE_FEATURES), np.nan)
    for i, name in enumerate(BASE_FEATURES):
        v = values.get(name)
        if v is not None:
            vec[i] = float(v)
    if ddt is not None:
        if ddt not in ("HDD", "SSD"):
            raise ValueError(f"DDT must be HDD or SSD, got {ddt!r}")
        vec[BASE_FEATURES.index("DDT_HDD")] = 1.0 if ddt == "HDD" else 0.0
        vec[BASE_FEATURES.index("DDT_SSD")] = 1.0 if ddt == "SSD" else 0.0
    return vec


def record_config(record: ServerRecord) -> dict[str, float]:
    """A prediction-ready feature dict from an existing record (levels unused)."""
    vec = record_features(record)
    return {name: float(v) for name, v in zip(BASE_FEATURES, vec) if not math.isnan(float(v))}


def predict_targets(
    bundles: Mapping[TargetKind, ModelBundle],
    config: Mapping[str, float | str | None],
) -> PredictionCurves:
    """Full what-if readout: 11-point power and efficiency curves, maximum
    throughput, and the composed efficiency cross-reference."""
    for kind in TargetKind:
        if kind not in bundles:
            raise ValueError(f"missing bundle for target {kind.value}")
        if bundles[kind].target_kind is not kind:
            raise ValueError(f"bundle tagged {bundles[kind].target_kind} supplied for {kind}")

    base = config_to_features(config)
    imputed = tuple(
        name for name, v in zip(BASE_FEATURES, base) if math.isnan(float(v))
    )
    flags: list[str] = []
    if len(imputed) == len(BASE_FEATURES):
        flags.append("all_features_missing")

    def rows_for(kind: TargetKind) -> np.ndarray:
        if kind is TargetKind.MAX_THROUGHPUT:
            return base[None, :]
        return np.hstack([np.tile(base, (len(LEVELS), 1)), np.array(LEVELS)[:, None]])

    preds: dict[TargetKind, np.ndarray] = {}
    for kind, bundle in bundles.items():
        rows = rows_for(kind)
        imputed_rows, _ = apply_imputer(bundle.imputer, rows)
        scaled = apply_scaler(bundle.scaler, imputed_rows)
        preds[kind] = bundle.model.predict(scaled)

    power = preds[TargetKind.POWER]
    perf = preds[TargetKind.PERF_TO_POWER]
    th_max = float(preds[TargetKind.MAX_THROUGHPUT][0])
    eq1 = tuple(
        0.0 if level == 0.0 else float(level * th_max / power[i])
        for i, level in enumerate(LEVELS)
    )
    if power[-1] < power[0]:
        flags.append("power_curve_nonmonotone")
    if (power <= 0).any():
        flags.append("nonpositive_power_prediction")

    return PredictionCurves(
        levels=LEVELS,
        power_curve=tuple(float(v) for v in power),
        perf_curve=tuple(float(v) for v in perf),
        eq1_curve=eq1,
        max_throughput=th_max,
        imputed_features=imputed,
        flags=tuple(flags),
        learner_tags={k.value: b.learner_tag for k, b in bundles.items()},
    )


def leaderboard_to_csv(leaderboard: Leaderboard, selected: str | None = None) -> str:
    lines = ["learner,status,selected,partition,rmse,r2,mape,maape,excluded_count,best_hp"]
    for entry in leaderboard.entries:
        hp_json = json.dumps(entry.best_hp, sort_keys=True).replace('"', "'")
        if not entry.metrics:
            lines.append(f'{entry.tag},{entry.status},{entry.tag == selected},,,,,,,"{hp_json}"')
            continue
        for partition, rep in entry.metrics.items():
            mape_s = "" if rep.mape is None else repr(rep.mape)
            maape_s = "" if rep.maape is None else repr(rep.maape)
            lines.append(
                f"{entry.tag},{entry.status},{entry.tag == selected},{partition},"
                f"{rep.rmse!r},{rep.r2!r},{mape_s},{maape_s},{rep.excluded_count},\"{hp_json}\""
            )
    return "\n".join(lines) + "\n"

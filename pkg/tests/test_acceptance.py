"""Release gate: every acceptance criterion as an executable check.

Each test asserts its criterion at the stated tolerance and records a
[PASS]/[FAIL]/[SKIP] line (replayed in the terminal summary).  The real-data
criteria run only when SERVERLENS_REAL_DATA points at a benchmark export;
without one they are skipped and the synthetic criteria govern.

Run with `pytest tests/test_acceptance.py -v` (the full-scale synthetic
training fixture takes a few minutes on commodity hardware).
"""

import math
import os
import time

import numpy as np
import pytest

import serverlens as sl
from serverlens.dataset import SyntheticSpec, SyntheticTruth, TargetKind, generate_synthetic
from serverlens.evaluation import PredictionSet, maape, mape, r_squared, rmse
from serverlens.hpo import (
    ContinuousUniform,
    ParamSpec,
    SearchSpace,
    bayes_optimize,
    expected_improvement,
    sample_hyperparams,
)
from serverlens.learners.gp import fit_gp
from serverlens.learners.linear import coordinate_descent
from serverlens.learners.net import _init_params, net_loss_and_grad
from serverlens.learners.trees import fit_gbt, fit_random_forest
from serverlens.pipeline import (
    PipelineConfig,
    child_seed,
    consistency_check_eq1,
    predict_targets,
    prospective_experiment,
    record_config,
    run_training,
)
from serverlens.preprocess import TaggedRows, fit_imputer, fit_scaler
from serverlens.split import random_server_split, time_series_split

from .conftest import record_criterion
from .reference_metrics import ref_maape, ref_mape, ref_r_squared, ref_rmse

REAL_DATA = os.environ.get("SERVERLENS_REAL_DATA")

SYNTH_SEED = 20240501
MASTER_SEED = 7


# ---------------------------------------------------------------------------
# shared expensive fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def synthetic_run():
    """Criterion 2's full-scale run: 1000 servers, desk profile, GBT only."""
    records, truth = generate_synthetic(
        SyntheticSpec(n_servers=1000, seed=SYNTH_SEED, noise_sd=0.03)
    )
    t0 = time.perf_counter()
    out = {}
    for target in TargetKind:
        config = PipelineConfig(
            target_kind=target, master_seed=MASTER_SEED, learners=("gbt",), profile="desk"
        )
        leaderboard, bundle = run_training(records, config)
        out[target] = (leaderboard, bundle)
    elapsed = time.perf_counter() - t0
    return records, truth, out, elapsed


@pytest.fixture(scope="session")
def noiseless_bundles():
    """Criteria 9/10: desk-tuned GBT bundles on a noiseless corpus."""
    records, truth = generate_synthetic(SyntheticSpec(n_servers=400, seed=17, noise_sd=0.0))
    bundles = {}
    for target in TargetKind:
        config = PipelineConfig(
            target_kind=target, master_seed=9, learners=("gbt",), profile="desk"
        )
        _, bundles[target] = run_training(records, config)
    return records, truth, bundles


# ---------------------------------------------------------------------------
# criterion 1: metric oracle equivalence
# ---------------------------------------------------------------------------


class TestMetricOracleEquivalence:
    def test_random_instances_match_independent_reference(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for i in range(100):
            n = int(rng.integers(2, 80))
            y = rng.normal(0, 10, n)
            if i % 5 == 0:
                y[rng.integers(n)] = 0.0
            yhat = y + rng.normal(0, 3, n)
            p = PredictionSet(y, yhat)
            pairs = [
                (rmse(p), ref_rmse(y, yhat)),
                (r_squared(p), ref_r_squared(y, yhat)),
                (maape(p), ref_maape(y, yhat)),
            ]
            got_m, got_e = mape(p)
            want_m, want_e = ref_mape(y, yhat)
            assert got_e == want_e
            pairs.append((got_m, want_m))
            for got, want in pairs:
                rel = abs(got - want) / max(abs(want), 1e-300)
                worst = max(worst, rel)
            assert all(
                abs(g - w) <= 1e-10 * max(abs(w), 1e-300) for g, w in pairs
            )
        record_criterion(
            "metric-oracle", True, f"100 instances, worst relative gap {worst:.2e} <= 1e-10"
        )

    def test_hand_values_exact(self):
        assert rmse(PredictionSet([0.0, 0.0], [3.0, 4.0])) == pytest.approx(
            math.sqrt(12.5), rel=1e-15
        )
        assert r_squared(PredictionSet([0.0, 1.0, 2.0], [2.0, 1.0, 0.0])) == -3.0
        assert mape(PredictionSet([100.0, 200.0], [110.0, 190.0]))[0] == pytest.approx(
            0.075, rel=1e-15
        )
        assert maape(PredictionSet([100.0], [200.0])) == pytest.approx(math.pi / 4, rel=1e-15)
        assert maape(PredictionSet([0.0], [5.0])) == pytest.approx(math.pi / 2, rel=1e-15)
        record_criterion(
            "metric-hand-values", True, "sqrt(12.5), R2=-3, MAPE 0.075, MAAPE pi/4 and pi/2"
        )


# ---------------------------------------------------------------------------
# criterion 2: synthetic end-to-end recovery
# ---------------------------------------------------------------------------


class TestSyntheticEndToEnd:
    def test_gbt_reaches_five_percent_on_all_targets_in_budget(self, synthetic_run):
        records, truth, out, elapsed = synthetic_run
        failures = []
        details = []
        for target in TargetKind:
            leaderboard, _ = out[target]
            test_maape = leaderboard.entry("gbt").metrics["test"].maape
            details.append(f"{target.value}={test_maape:.4f}")
            if not test_maape <= 0.05:
                failures.append(f"{target.value} MAAPE {test_maape:.4f} > 0.05")
        if elapsed > 900.0:
            failures.append(f"runtime {elapsed:.0f}s > 900s")
        record_criterion(
            "synthetic-e2e",
            not failures,
            f"test MAAPE {', '.join(details)}; runtime {elapsed:.0f}s <= 900s",
        )
        assert not failures, failures

    def test_predicted_power_curves_track_generator_truth(self, synthetic_run):
        records, truth, out, _ = synthetic_run
        bundles = {t: b for t, (_, b) in out.items()}
        truths = []
        preds = []
        for r in records[:50]:
            curves = predict_targets(bundles, record_config(r))
            year = r.had_year
            for level, watts in zip(curves.levels, curves.power_curve):
                preds.append(watts)
                truths.append(truth.power(r.cc, r.mmc, year, level))
        value = maape(PredictionSet(np.array(truths), np.array(preds)))
        record_criterion(
            "synthetic-truth-curves", value <= 0.10,
            f"power-curve MAAPE vs generator truth {value:.4f} <= 0.10",
        )
        assert value <= 0.10


# ---------------------------------------------------------------------------
# criterion 3: real-data reproduction (requires a user-supplied export)
# ---------------------------------------------------------------------------


class TestRealDataReproduction:
    def test_real_export_mape_maape_and_gbt_rank(self):
        if not REAL_DATA:
            record_criterion(
                "real-data", None,
                "no benchmark export supplied (set SERVERLENS_REAL_DATA); synthetic criterion governs",
            )
            pytest.skip("no real benchmark export supplied")
        with open(REAL_DATA, encoding="utf-8") as fh:
            text = fh.read()
        if text.startswith("server_id,"):
            records, _ = sl.read_canonical_csv(text)
        else:
            records, _ = sl.ingest_results_csv(text)
        failures = []
        details = []
        for target in TargetKind:
            config = PipelineConfig(
                target_kind=target, master_seed=MASTER_SEED, profile="desk"
            )
            leaderboard, bundle = run_training(records, config)
            m = leaderboard.entry(bundle.learner_tag).metrics["test"]
            ranked = sorted(
                leaderboard.successful(),
                key=lambda e: e.metrics["test"].maape
                if e.metrics["test"].maape is not None
                else math.inf,
            )
            gbt_rank = 1 + [e.tag for e in ranked].index("gbt")
            details.append(
                f"{target.value}: mape={m.mape:.4f} maape={m.maape:.4f} gbt_rank={gbt_rank}"
            )
            if m.mape > 0.15 or m.maape > 0.15:
                failures.append(f"{target.value} above 15%")
            if gbt_rank > 2:
                failures.append(f"{target.value} gbt rank {gbt_rank} > 2")
        record_criterion("real-data", not failures, "; ".join(details))
        assert not failures, failures


# ---------------------------------------------------------------------------
# criterion 4: prospective degradation
# ---------------------------------------------------------------------------


class TestProspectiveDegradation:
    def test_synthetic_shift_degrades_beyond_crossing_horizon(self):
        truth = SyntheticTruth(shift_year=2016)
        records, _ = generate_synthetic(
            SyntheticSpec(n_servers=400, seed=23, noise_sd=0.02,
                          year_range=(2006, 2019), truth=truth)
        )
        config = PipelineConfig(
            target_kind=TargetKind.POWER, master_seed=31, learners=("gbt",),
            bo_budget=8, bo_n_init=5,
        )
        grid = prospective_experiment(records, config, baseline_years=[2013, 2014],
                                      horizons=(1, 2, 3, 4))
        means = grid.horizon_means()
        # baselines 2013/2014 with the shift at 2016: horizon 1 stays pre-shift
        # for 2013 (2014) and pre-shift for 2014 (2015); horizons >= 3 are all
        # shifted, so degradation must appear there.
        crossing = means[3]
        ok = crossing is not None and means[1] is not None and crossing > means[1]
        detail = f"horizon means h1={means[1]:.4f} h3={crossing:.4f} (shift at 2016)"
        record_criterion("prospective-degradation-synthetic", ok, detail)
        assert ok, detail

    def test_real_data_horizon_degradation(self):
        if not REAL_DATA:
            record_criterion(
                "prospective-degradation-real", None,
                "no benchmark export supplied; synthetic shift variant governs",
            )
            pytest.skip("no real benchmark export supplied")
        with open(REAL_DATA, encoding="utf-8") as fh:
            text = fh.read()
        records = (
            sl.read_canonical_csv(text)[0]
            if text.startswith("server_id,")
            else sl.ingest_results_csv(text)[0]
        )
        config = PipelineConfig(target_kind=TargetKind.POWER, master_seed=MASTER_SEED,
                                profile="desk")
        grid = prospective_experiment(records, config,
                                      baseline_years=range(2010, 2023), horizons=(1, 2, 3, 4, 5))
        means = grid.horizon_means()
        later = [means[h] for h in (3, 4, 5) if means.get(h) is not None]
        ok = (
            means.get(1) is not None
            and all(v > means[1] for v in later)
            and all(means[h] > 0.20 for h in (2, 3, 4, 5) if means.get(h) is not None)
        )
        record_criterion("prospective-degradation-real", ok, f"horizon means {means}")
        assert ok, means


# ---------------------------------------------------------------------------
# criterion 5: Bayesian-optimization sanity
# ---------------------------------------------------------------------------


class TestBoSanity:
    def test_ei_closed_form_exact(self):
        assert expected_improvement(1.0, 0.0, 0.0) == 0.0
        ei0 = expected_improvement(0.0, 1.0, 0.0)
        assert abs(ei0 - 1.0 / math.sqrt(2.0 * math.pi)) <= 1e-12
        record_criterion("bo-ei-closed-form", True,
                         "EI(sigma=0, no improvement)=0; EI(z=0)=1/sqrt(2pi) to 1e-12")

    def test_bo_beats_matched_random_search(self):
        space = SearchSpace("quad", (ParamSpec("x", ContinuousUniform(0.0, 1.0)),))
        wins = 0
        n_seeds = 20
        for seed in range(n_seeds):
            obj = lambda hp: (hp["x"] - 0.3) ** 2  # noqa: E731
            _, hist = bayes_optimize(obj, space, budget=30, n_init=8, seed=seed)
            random_best = min(
                (h["x"] - 0.3) ** 2 for h in sample_hyperparams(space, 30, seed=77_000 + seed)
            )
            wins += hist.best_value <= random_best
        ok = wins >= 16
        record_criterion("bo-vs-random", ok, f"BO won {wins}/20 paired seeds (need >= 16)")
        assert ok


# ---------------------------------------------------------------------------
# criterion 6: leakage and split invariants
# ---------------------------------------------------------------------------


class TestLeakageAndSplits:
    def test_split_and_leakage_invariants(self):
        records, _ = generate_synthetic(SyntheticSpec(n_servers=949, seed=1))
        matrix, _ = sl.build_design_matrix(records, TargetKind.POWER)
        split = random_server_split(matrix, seed=0)
        counts = {
            name: len({matrix.group_ids[int(i)] for i in rows})
            for name, rows in split.partition_of().items()
        }
        ok_counts = counts == {"train": 759, "validation": 94, "test": 96}

        assignment = {}
        atomic = True
        for name, rows in split.partition_of().items():
            for i in rows:
                sid = matrix.group_ids[int(i)]
                if assignment.setdefault(sid, name) != name:
                    atomic = False

        poisoned = matrix.X.copy()
        poisoned[split.test] = 1e12
        imp_a = fit_imputer(TaggedRows(matrix.X[split.train], "train"), 5)
        imp_b = fit_imputer(TaggedRows(poisoned[split.train], "train"), 5)
        sc_a = fit_scaler(TaggedRows(matrix.X[split.train], "train"))
        sc_b = fit_scaler(TaggedRows(poisoned[split.train], "train"))
        ok_poison = np.array_equal(imp_a.means, imp_b.means) and np.array_equal(
            sc_a.mean, sc_b.mean
        )

        tsplit = time_series_split(matrix, baseline_year=2016, horizon=2)
        had = matrix.schema.index("HAD")
        from datetime import date

        cutoff = date(2016, 1, 1).toordinal()
        ok_time = all(
            matrix.X[int(i), had] < cutoff for i in np.concatenate([tsplit.train, tsplit.validation])
        ) and all(
            date.fromordinal(int(matrix.X[int(i), had])).year == 2018 for i in tsplit.test
        )

        ok = ok_counts and atomic and ok_poison and ok_time
        record_criterion(
            "leakage-and-splits", ok,
            f"S=949 -> {counts['train']}/{counts['validation']}/{counts['test']}; "
            f"atomic={atomic}; poisoned-preprocessing-invariant={ok_poison}; "
            f"time-split chronology={ok_time}",
        )
        assert ok


# ---------------------------------------------------------------------------
# criterion 7: learner-level numerics
# ---------------------------------------------------------------------------


class TestLearnerNumerics:
    def test_all_learner_numeric_contracts(self):
        rng = np.random.default_rng(5)
        details = []

        # FFN gradient vs central differences
        X = rng.normal(size=(10, 4))
        y = rng.normal(size=10)
        params = _init_params((4, 8, 8, 1), rng)
        _, grads = net_loss_and_grad(params, X, y)
        eps = 1e-5
        worst = 0.0
        for pi, p in enumerate(params):
            flat = p.reshape(-1)
            gflat = grads[pi].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                lp, _ = net_loss_and_grad(params, X, y)
                flat[j] = orig - eps
                lm, _ = net_loss_and_grad(params, X, y)
                flat[j] = orig
                fd = (lp - lm) / (2 * eps)
                worst = max(worst, abs(gflat[j] - fd) / max(abs(fd), abs(gflat[j]), 1e-8))
        ok_ffn = worst < 1e-4
        details.append(f"ffn-grad={worst:.2e}")

        # elastic net at rho=0 equals closed-form ridge
        Xr = rng.normal(size=(30, 4))
        yr = rng.normal(size=30)
        lam = 0.45
        beta, b0 = coordinate_descent(Xr, yr, lam=lam, rho=0.0, tol=1e-14)
        Xc = Xr - Xr.mean(axis=0)
        yc = yr - yr.mean()
        ref = np.linalg.solve(Xc.T @ Xc + 30 * lam * np.eye(4), Xc.T @ yc)
        ridge_gap = float(np.abs(beta - ref).max())
        ok_ridge = ridge_gap < 1e-6
        details.append(f"ridge-gap={ridge_gap:.2e}")

        # GBT training-loss monotonicity without sampling
        Xg = rng.normal(size=(200, 5))
        yg = 3 * Xg[:, 0] + np.sin(2 * Xg[:, 1]) + rng.normal(0, 0.1, 200)
        gbt = fit_gbt(Xg, yg, Xg, yg, {"max_depth": 3, "n_rounds": 60, "learning_rate": 0.1,
                                       "subsample": 1.0, "colsample_bytree": 1.0,
                                       "reg_alpha": 0.0, "reg_lambda": 0.0})
        ok_mono = bool(np.all(np.diff(np.array(gbt.train_rmse_history)) <= 1e-9))
        details.append(f"gbt-monotone={ok_mono}")

        # RF prediction equals the exact mean of tree predictions
        rf = fit_random_forest(Xg, yg, Xg, yg, {"max_depth": 5, "n_trees": 12,
                                                "colsample_bytree": 1.0, "colsample_bylevel": 1.0,
                                                "colsample_bynode": 1.0, "reg_alpha": 0.0,
                                                "reg_lambda": 0.0, "learning_rate": 1.0}, seed=2)
        ok_rf = bool(np.array_equal(rf.predict(Xg), rf.tree_predictions(Xg).mean(axis=0)))
        details.append(f"rf-mean-exact={ok_rf}")

        # near-noiseless GP interpolates its training points
        Xs = np.sort(rng.uniform(0, 6, 40))[:, None]
        ys = np.sin(Xs[:, 0])
        gp = fit_gp(Xs, ys, Xs, ys, {"n_inducing": 40, "kernel": "rbf", "learning_rate": 0.05},
                    seed=3, n_iters=0, initial_params=(1.0, 1.0, 1e-8))
        gp_err = float(np.abs(gp.predict(Xs) - ys).max())
        ok_gp = gp_err < 1e-3
        details.append(f"gp-interp={gp_err:.2e}")

        ok = ok_ffn and ok_ridge and ok_mono and ok_rf and ok_gp
        record_criterion("learner-numerics", ok, ", ".join(details))
        assert ok, details


# ---------------------------------------------------------------------------
# criterion 8: importance correctness
# ---------------------------------------------------------------------------


class TestImportanceCorrectness:
    def test_dominant_feature_ranks_first_across_seeds(self):
        firsts = 0
        n_seeds = 20
        for seed in range(n_seeds):
            rng = np.random.default_rng(3_000 + seed)
            X = rng.normal(size=(400, 6))
            y = 6.0 * X[:, 0] + 0.5 * X[:, 1] + 0.3 * X[:, 2] + rng.normal(0, 0.3, 400)
            model = fit_gbt(X, y, X, y, {"max_depth": 4, "n_rounds": 80, "learning_rate": 0.2,
                                         "subsample": 1.0, "colsample_bytree": 1.0,
                                         "reg_alpha": 0.0, "reg_lambda": 1.0}, seed=seed)
            Xh = rng.normal(size=(300, 6))
            yh = 6.0 * Xh[:, 0] + 0.5 * Xh[:, 1] + 0.3 * Xh[:, 2] + rng.normal(0, 0.3, 300)
            report = sl.permutation_importance(model, Xh, yh, repeats=10, seed=seed)
            firsts += report.ranking()[0][0] == "x0"
        ok = firsts >= 19
        record_criterion("importance-dominant", ok, f"dominant feature first in {firsts}/20 seeds")
        assert ok

    def test_tree_unused_feature_scores_exactly_zero(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(300, 5))
        y = 4.0 * (X[:, 2] > 0) + rng.normal(0, 0.05, 300)
        model = fit_gbt(X, y, X, y, {"max_depth": 2, "n_rounds": 30, "learning_rate": 0.5,
                                     "subsample": 1.0, "colsample_bytree": 1.0,
                                     "reg_alpha": 0.0, "reg_lambda": 0.0})
        used = set(model.trees.feature[model.trees.feature >= 0].tolist())
        unused = [j for j in range(5) if j not in used]
        report = sl.permutation_importance(model, X, y, repeats=5, seed=1)
        ok = bool(unused) and all(report.mean_decrease[j] == 0.0 for j in unused)
        record_criterion("importance-unused-zero", ok,
                         f"{len(unused)} unused feature(s) all exactly 0")
        assert ok


# ---------------------------------------------------------------------------
# criterion 9: efficiency-identity diagnostic
# ---------------------------------------------------------------------------


class TestEq1Diagnostic:
    def test_median_relative_residual_under_five_percent(self, noiseless_bundles):
        records, truth, bundles = noiseless_bundles
        configs = [record_config(r) for r in records[:25]]
        report = consistency_check_eq1(
            bundles[TargetKind.POWER],
            bundles[TargetKind.MAX_THROUGHPUT],
            bundles[TargetKind.PERF_TO_POWER],
            configs,
        )
        idle_exact = all(c.composed == 0.0 for c in report.cells if c.level == 0.0)
        ok = report.median_relative < 0.05 and idle_exact
        record_criterion(
            "eq1-diagnostic", ok,
            f"median relative residual {report.median_relative:.4f} < 0.05; "
            f"idle composed exactly 0: {idle_exact}",
        )
        assert ok


# ---------------------------------------------------------------------------
# criterion 10: persistence
# ---------------------------------------------------------------------------


class TestPersistence:
    def test_round_trip_bit_identical_and_corruption_rejected(self, noiseless_bundles, tmp_path):
        from serverlens.bundle import BundleIntegrityError

        records, truth, bundles = noiseless_bundles
        rng = np.random.default_rng(99)
        max_diff = 0.0
        for target, bundle in bundles.items():
            path = str(tmp_path / f"{target.value}.json")
            sl.save_bundle(bundle, path)
            loaded = sl.load_bundle(path)
            configs = rng.normal(size=(100, bundle.model.n_features))
            a = bundle.model.predict(configs)
            b = loaded.model.predict(configs)
            max_diff = max(max_diff, float(np.abs(a - b).max()))
        ok_roundtrip = max_diff == 0.0

        path = str(tmp_path / "corrupt.json")
        sl.save_bundle(bundles[TargetKind.POWER], path)
        with open(path) as fh:
            text = fh.read()
        with open(path, "w") as fh:
            fh.write(text[: len(text) - 40])
        try:
            sl.load_bundle(path)
            ok_corrupt = False
        except BundleIntegrityError:
            ok_corrupt = True

        ok = ok_roundtrip and ok_corrupt
        record_criterion(
            "persistence", ok,
            f"round-trip max |diff| = {max_diff}; truncated file rejected: {ok_corrupt}",
        )
        assert ok

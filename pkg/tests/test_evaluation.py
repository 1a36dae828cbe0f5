import math

import numpy as np
import pytest

from serverlens.evaluation import (
    ImportanceReport,
    PredictionSet,
    compute_metrics,
    importance_to_csv,
    maape,
    mape,
    permutation_importance,
    r_squared,
    rmse,
)
from serverlens.learners.linear import LinearModel
from serverlens.learners.trees import fit_gbt

from .reference_metrics import ref_maape, ref_mape, ref_r_squared, ref_rmse


def _ps(y, yhat):
    return PredictionSet(np.asarray(y, dtype=float), np.asarray(yhat, dtype=float))


class TestRmse:
    def test_perfect_prediction(self):
        assert rmse(_ps([1, 2, 3], [1, 2, 3])) == 0.0

    def test_hand_value(self):
        assert rmse(_ps([0, 0], [3, 4])) == pytest.approx(math.sqrt(12.5), rel=1e-15)

    def test_scale_equivariance(self):
        y = np.array([1.0, 5.0, -2.0])
        yhat = np.array([1.5, 4.0, -2.5])
        assert rmse(_ps(2 * y, 2 * yhat)) == pytest.approx(2 * rmse(_ps(y, yhat)), rel=1e-14)


class TestRSquared:
    def test_perfect_prediction(self):
        assert r_squared(_ps([0, 1, 2], [0, 1, 2])) == 1.0

    def test_mean_predictor_is_zero(self):
        y = [0.0, 1.0, 2.0]
        assert r_squared(_ps(y, [1.0, 1.0, 1.0])) == 0.0

    def test_hand_value_negative(self):
        assert r_squared(_ps([0, 1, 2], [2, 1, 0])) == pytest.approx(-3.0, rel=1e-15)

    def test_constant_observations_rejected(self):
        with pytest.raises(ValueError):
            r_squared(_ps([5, 5, 5], [1, 2, 3]))


class TestMape:
    def test_hand_value(self):
        value, excluded = mape(_ps([100, 200], [110, 190]))
        assert value == pytest.approx(0.075, rel=1e-15)
        assert excluded == 0

    def test_perfect_prediction(self):
        assert mape(_ps([3, 4], [3, 4]))[0] == 0.0

    def test_zero_observation_excluded_with_count(self):
        value, excluded = mape(_ps([0, 100], [5, 100]))
        assert value == 0.0 and excluded == 1

    def test_all_zero_undefined(self):
        value, excluded = mape(_ps([0.0, 0.0], [1.0, 2.0]))
        assert value is None and excluded == 2


class TestMaape:
    def test_perfect_prediction(self):
        assert maape(_ps([1, 2], [1, 2])) == 0.0

    def test_zero_observation_limit(self):
        assert maape(_ps([0.0], [5.0])) == pytest.approx(math.pi / 2, rel=1e-15)

    def test_double_error_hand_value(self):
        assert maape(_ps([100.0], [200.0])) == pytest.approx(math.pi / 4, rel=1e-15)

    def test_zero_zero_contributes_nothing(self):
        assert maape(_ps([0.0, 100.0], [0.0, 100.0])) == 0.0

    def test_bounded_by_half_pi_with_equality_only_all_zero_errs(self):
        assert maape(_ps([0.0, 0.0], [1.0, 2.0])) == pytest.approx(math.pi / 2)
        assert maape(_ps([0.0, 1.0], [1.0, 99.0])) < math.pi / 2

    def test_scale_invariance(self):
        y = np.array([1.0, 5.0, 0.1])
        yhat = np.array([1.5, 4.0, 0.3])
        assert maape(_ps(3 * y, 3 * yhat)) == pytest.approx(maape(_ps(y, yhat)), rel=1e-12)
        v1, _ = mape(_ps(3 * y, 3 * yhat))
        v2, _ = mape(_ps(y, yhat))
        assert v1 == pytest.approx(v2, rel=1e-12)


class TestOracleEquivalence:
    def test_hundred_random_instances_match_reference(self):
        rng = np.random.default_rng(42)
        for i in range(100):
            n = int(rng.integers(2, 60))
            y = rng.normal(0, 10, n)
            if i % 7 == 0:
                y[rng.integers(n)] = 0.0  # exercise the zero-observation paths
            yhat = y + rng.normal(0, 2, n)
            p = _ps(y, yhat)
            assert rmse(p) == pytest.approx(ref_rmse(y, yhat), rel=1e-10)
            assert r_squared(p) == pytest.approx(ref_r_squared(y, yhat), rel=1e-10)
            got_mape, got_excl = mape(p)
            want_mape, want_excl = ref_mape(y, yhat)
            assert got_excl == want_excl
            assert got_mape == pytest.approx(want_mape, rel=1e-10)
            assert maape(p) == pytest.approx(ref_maape(y, yhat), rel=1e-10)


class TestComputeMetrics:
    def test_report_excludes_zero_rows_from_percentage_metrics(self):
        y = np.array([0.0, 100.0, 200.0])
        yhat = np.array([5.0, 110.0, 190.0])
        rep = compute_metrics(y, yhat)
        assert rep.excluded_count == 1
        assert rep.mape == pytest.approx(0.075)
        assert rep.maape == pytest.approx((math.atan(0.1) + math.atan(0.05)) / 2)
        assert rep.rmse == pytest.approx(ref_rmse(y, yhat))

    def test_report_fields_finite_on_regular_data(self):
        rng = np.random.default_rng(0)
        y = rng.normal(50, 10, 100)
        rep = compute_metrics(y, y + rng.normal(0, 1, 100))
        assert all(
            math.isfinite(v) for v in (rep.rmse, rep.r2, rep.mape, rep.maape)
        )


class _IdentityOnColumn:
    """Toy model: prediction equals one chosen input column."""

    def __init__(self, col: int):
        self.col = col

    def predict(self, X):
        return X[:, self.col].copy()


class TestPermutationImportance:
    def test_relied_on_feature_dominates(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(1000, 3))
        y = X[:, 0].copy()
        report = permutation_importance(_IdentityOnColumn(0), X, y, repeats=5, seed=0)
        assert report.mean_decrease[0] > 0.5
        assert report.ranking()[0][0] == "x0"

    def test_unused_feature_importance_exactly_zero(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(200, 4))
        y = 2.0 * X[:, 1] + rng.normal(0, 0.1, 200)
        model = LinearModel(
            coefficients=np.array([0.0, 2.0, 0.0, 0.0]),
            intercept=0.0, degree=1, n_features=4, lam=0.0, rho=0.5,
        )
        report = permutation_importance(model, X, y, repeats=6, seed=1)
        assert np.all(report.mean_decrease[[0, 2, 3]] == 0.0)
        assert np.all(report.sd_decrease[[0, 2, 3]] == 0.0)

    def test_tree_unused_feature_importance_exactly_zero(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(300, 5))
        y = 4.0 * (X[:, 2] > 0) + rng.normal(0, 0.05, 300)
        hp = {"max_depth": 2, "n_rounds": 30, "learning_rate": 0.5,
              "subsample": 1.0, "colsample_bytree": 1.0, "reg_alpha": 0.0, "reg_lambda": 0.0}
        model = fit_gbt(X, y, X, y, hp)
        used = set(model.trees.feature[model.trees.feature >= 0].tolist())
        report = permutation_importance(model, X, y, repeats=4, seed=2)
        for j in range(5):
            if j not in used:
                assert np.all(report.mean_decrease[j] == 0.0)

    def test_duplicate_feature_with_zero_weight_scores_zero(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=500)
        X = np.column_stack([x, x])
        y = 3.0 * x
        model = LinearModel(
            coefficients=np.array([3.0, 0.0]),
            intercept=0.0, degree=1, n_features=2, lam=0.0, rho=0.5,
        )
        report = permutation_importance(model, X, y, repeats=5, seed=3)
        assert report.mean_decrease[1] == 0.0
        assert report.mean_decrease[0] > 0.5

    def test_input_rows_unmodified_and_deterministic(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(100, 3))
        y = X[:, 0] + 0.1 * rng.normal(size=100)
        snapshot = X.copy()
        a = permutation_importance(_IdentityOnColumn(0), X, y, repeats=3, seed=9)
        b = permutation_importance(_IdentityOnColumn(0), X, y, repeats=3, seed=9)
        assert np.array_equal(X, snapshot)
        assert np.array_equal(a.mean_decrease, b.mean_decrease)
        assert np.array_equal(a.sd_decrease, b.sd_decrease)

    def test_constant_targets_rejected(self):
        X = np.zeros((10, 2))
        with pytest.raises(ValueError):
            permutation_importance(_IdentityOnColumn(0), X, np.ones(10), repeats=2, seed=0)

    def test_csv_export_sorted_by_mean_decrease(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(400, 2))
        y = X[:, 1].copy()
        report = permutation_importance(
            _IdentityOnColumn(1), X, y, repeats=3, seed=4, feature_names=("a", "b")
        )
        lines = importance_to_csv(report).strip().splitlines()
        assert lines[0] == "feature,mean_r2_decrease,sd_r2_decrease"
        assert lines[1].startswith("b,")

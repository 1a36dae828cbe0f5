import numpy as np
import pytest

from serverlens.learners.trees import (
    EARLY_STOP_PATIENCE,
    ForestModel,
    GbtModel,
    fit_gbt,
    fit_random_forest,
)

GBT_PLAIN = {
    "colsample_bytree": 1.0,
    "subsample": 1.0,
    "max_depth": 3,
    "n_rounds": 50,
    "reg_alpha": 0.0,
    "reg_lambda": 0.0,
    "learning_rate": 0.3,
}

RF_PLAIN = {
    "colsample_bytree": 1.0,
    "colsample_bylevel": 1.0,
    "colsample_bynode": 1.0,
    "max_depth": 6,
    "n_trees": 25,
    "reg_alpha": 0.0,
    "reg_lambda": 0.0,
    "learning_rate": 1.0,
}


def _synth(n=200, d=5, seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = 3.0 * X[:, 0] + np.sin(2 * X[:, 1]) + 5.0 * (X[:, 2] > 0) + rng.normal(0, noise, n)
    return X, y


class TestGbt:
    def test_zero_rounds_is_constant_mean_predictor(self):
        X, y = _synth(50)
        model = fit_gbt(X, y, X, y, dict(GBT_PLAIN, n_rounds=0))
        assert np.allclose(model.predict(X), y.mean())

    def test_single_stump_hand_case(self):
        X = np.array([[0.0], [1.0]])
        y = np.array([0.0, 10.0])
        model = fit_gbt(X, y, X, y, dict(GBT_PLAIN, max_depth=1, n_rounds=1, learning_rate=1.0))
        # base 5; residual leaves -5 and +5 at lr=1 reproduce the targets
        assert np.allclose(model.predict(X), [0.0, 10.0])

    def test_training_rmse_monotone_nonincreasing_without_sampling(self):
        for seed in range(3):
            X, y = _synth(200, seed=seed)
            model = fit_gbt(X, y, X, y, dict(GBT_PLAIN, learning_rate=0.1, n_rounds=60), seed=seed)
            hist = np.array(model.train_rmse_history)
            assert np.all(np.diff(hist) <= 1e-9)

    def test_boosting_beats_initial_training_rmse(self):
        X, y = _synth(300, seed=1)
        model = fit_gbt(X, y, X, y, dict(GBT_PLAIN, learning_rate=1.0, max_depth=8, n_rounds=40))
        rmse0 = float(np.sqrt(np.mean((y - y.mean()) ** 2)))
        rmse = float(np.sqrt(np.mean((y - model.predict(X)) ** 2)))
        assert rmse < rmse0

    def test_depth_bound_respected(self):
        X, y = _synth(400, seed=2)
        for depth in (1, 2, 4):
            model = fit_gbt(X, y, X, y, dict(GBT_PLAIN, max_depth=depth, n_rounds=10))
            assert max(model.trees.tree_depths()) <= depth

    def test_pure_leaf_weight_equals_mean_residual(self):
        # one round, lr=1, alpha=lam=0, deep tree on few distinct points:
        # every leaf is pure so predictions equal the exact targets
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([1.0, -2.0, 7.0, 0.5])
        model = fit_gbt(X, y, X, y, dict(GBT_PLAIN, max_depth=10, n_rounds=1, learning_rate=1.0))
        assert np.allclose(model.predict(X), y)

    def test_early_stopping_truncates_to_best_round(self):
        X, y = _synth(150, seed=3, noise=1.0)
        rng = np.random.default_rng(99)
        Xv = rng.normal(size=(80, 5))
        yv = 3.0 * Xv[:, 0] + np.sin(2 * Xv[:, 1]) + 5.0 * (Xv[:, 2] > 0) + rng.normal(0, 1.0, 80)
        model = fit_gbt(X, y, Xv, yv, dict(GBT_PLAIN, max_depth=8, learning_rate=1.0, n_rounds=500))
        executed = len(model.val_rmse_history)
        assert model.best_round <= executed
        assert executed < 500  # overfitting at lr=1 must trigger the patience stop
        assert executed - model.best_round >= EARLY_STOP_PATIENCE
        assert model.trees.n_trees == model.best_round

    def test_deterministic_given_seed_and_hp(self):
        X, y = _synth(120, seed=4)
        hp = dict(GBT_PLAIN, subsample=0.7, colsample_bytree=0.6, n_rounds=20)
        a = fit_gbt(X, y, X, y, hp, seed=11)
        b = fit_gbt(X, y, X, y, hp, seed=11)
        assert np.array_equal(a.predict(X), b.predict(X))
        c = fit_gbt(X, y, X, y, hp, seed=12)
        assert not np.array_equal(a.predict(X), c.predict(X))

    def test_tiny_sampling_ratios_clamped_not_crashed(self):
        X, y = _synth(40, seed=5)
        model = fit_gbt(X, y, X, y, dict(GBT_PLAIN, subsample=1e-9, colsample_bytree=1e-9, n_rounds=3))
        assert model.n_clamped > 0
        assert np.isfinite(model.predict(X)).all()

    def test_l2_shrinks_leaf_updates(self):
        X = np.array([[0.0], [1.0]])
        y = np.array([0.0, 10.0])
        hp = dict(GBT_PLAIN, max_depth=1, n_rounds=1, learning_rate=1.0, reg_lambda=1.0)
        model = fit_gbt(X, y, X, y, hp)
        # leaf weight -G/(H+lam) = 5/2 = 2.5 instead of 5
        assert np.allclose(model.predict(X), [5.0 - 2.5, 5.0 + 2.5])

    def test_l1_soft_threshold_on_leaf_weights(self):
        X = np.array([[0.0], [1.0]])
        y = np.array([0.0, 10.0])
        hp = dict(GBT_PLAIN, max_depth=1, n_rounds=1, learning_rate=1.0, reg_alpha=2.0)
        model = fit_gbt(X, y, X, y, hp)
        # |G|=5 soft-thresholded by 2 -> 3; weights -/+3
        assert np.allclose(model.predict(X), [2.0, 8.0])


class TestRandomForest:
    def test_single_tree_forest_equals_that_tree(self):
        X, y = _synth(100, seed=6)
        model = fit_random_forest(X, y, X, y, dict(RF_PLAIN, n_trees=1), seed=3)
        per_tree = model.tree_predictions(X)
        assert per_tree.shape == (1, 100)
        assert np.array_equal(model.predict(X), per_tree.mean(axis=0))

    def test_prediction_is_exact_mean_of_tree_predictions(self):
        X, y = _synth(80, seed=7)
        model = fit_random_forest(X, y, X, y, dict(RF_PLAIN, n_trees=15), seed=4)
        per_tree = model.tree_predictions(X)
        assert np.array_equal(model.predict(X), per_tree.mean(axis=0))

    def test_forest_beats_single_tree_on_heldout_most_seeds(self):
        wins = 0
        n_seeds = 20
        for seed in range(n_seeds):
            X, y = _synth(150, seed=100 + seed, noise=1.0)
            Xv, yv = _synth(150, seed=500 + seed, noise=1.0)
            forest = fit_random_forest(X, y, Xv, yv, dict(RF_PLAIN, n_trees=30), seed=seed)
            single = fit_random_forest(X, y, Xv, yv, dict(RF_PLAIN, n_trees=1), seed=seed)
            rmse_f = np.sqrt(np.mean((yv - forest.predict(Xv)) ** 2))
            rmse_s = np.sqrt(np.mean((yv - single.predict(Xv)) ** 2))
            wins += rmse_f <= rmse_s
        assert wins >= 0.9 * n_seeds

    def test_depth_bound_respected(self):
        X, y = _synth(300, seed=8)
        model = fit_random_forest(X, y, X, y, dict(RF_PLAIN, max_depth=3, n_trees=10), seed=5)
        assert max(model.trees.tree_depths()) <= 3

    def test_deterministic_and_scheduling_independent_seeds(self):
        X, y = _synth(90, seed=9)
        hp = dict(RF_PLAIN, n_trees=8, colsample_bytree=0.6, colsample_bylevel=0.8,
                  colsample_bynode=0.7)
        a = fit_random_forest(X, y, X, y, hp, seed=21)
        b = fit_random_forest(X, y, X, y, hp, seed=21)
        assert np.array_equal(a.predict(X), b.predict(X))

    def test_bootstrap_differs_across_trees(self):
        X, y = _synth(60, seed=10)
        model = fit_random_forest(X, y, X, y, dict(RF_PLAIN, n_trees=2, max_depth=8), seed=6)
        per_tree = model.tree_predictions(X)
        assert not np.array_equal(per_tree[0], per_tree[1])


class TestPredictContract:
    def test_wrong_feature_count_rejected(self):
        X, y = _synth(30, seed=11)
        model = fit_gbt(X, y, X, y, dict(GBT_PLAIN, n_rounds=2))
        with pytest.raises(ValueError):
            model.predict(np.zeros((3, 2)))

    def test_predictions_finite(self):
        X, y = _synth(100, seed=12)
        for model in (
            fit_gbt(X, y, X, y, dict(GBT_PLAIN, n_rounds=10)),
            fit_random_forest(X, y, X, y, dict(RF_PLAIN, n_trees=5), seed=1),
        ):
            assert np.isfinite(model.predict(X)).all()

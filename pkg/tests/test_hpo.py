import json
import math
import os

import numpy as np
import pytest

from serverlens.hpo import (
    SEARCH_SPACES,
    Categorical,
    ContinuousUniform,
    HpoError,
    IntegerUniform,
    LogUniform,
    ParamSpec,
    SearchSpace,
    bayes_optimize,
    decode,
    encode,
    expected_improvement,
    sample_hyperparams,
)

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "search_space_golden.json")

UNIT = SearchSpace("unit", (ParamSpec("x", ContinuousUniform(0.0, 1.0)),))


class TestSearchSpaceTranscription:
    def test_matches_checked_in_golden_table(self):
        with open(GOLDEN, encoding="utf-8") as fh:
            golden = json.load(fh)
        actual = {tag: space.to_table() for tag, space in SEARCH_SPACES.items()}
        assert actual == golden

    def test_every_learner_has_a_space(self):
        assert set(SEARCH_SPACES) == {
            "elastic_net", "elastic_net_poly", "gp", "gbt", "rf", "ffn",
        }

    def test_validation_rejects_out_of_range(self):
        space = SEARCH_SPACES["gbt"]
        hp = sample_hyperparams(space, 1, seed=0)[0]
        hp["max_depth"] = 11
        with pytest.raises(ValueError):
            space.validate(hp)

    def test_validation_rejects_wrong_keys(self):
        with pytest.raises(ValueError):
            SEARCH_SPACES["elastic_net"].validate({"alpha": 0.5})


class TestSampling:
    def test_degenerate_uniform_always_the_same(self):
        space = SearchSpace("s", (ParamSpec("x", ContinuousUniform(0.7, 0.7)),))
        assert all(hp["x"] == 0.7 for hp in sample_hyperparams(space, 50, seed=1))

    def test_integer_uniform_hits_both_bounds(self):
        space = SearchSpace("s", (ParamSpec("k", IntegerUniform(1, 10)),))
        values = {hp["k"] for hp in sample_hyperparams(space, 10_000, seed=2)}
        assert values == set(range(1, 11))

    def test_log_uniform_median_near_geometric_midpoint(self):
        space = SearchSpace("s", (ParamSpec("lr", LogUniform(1e-5, 1.0)),))
        draws = np.array([hp["lr"] for hp in sample_hyperparams(space, 10_000, seed=3)])
        below = int((draws < 10 ** (-2.5)).sum())
        # two-sided binomial check at p=0.5: ~3.3 sigma band around 5000
        assert abs(below - 5000) < 170

    def test_categorical_equal_probability(self):
        space = SearchSpace("s", (ParamSpec("k", Categorical(("a", "b", "c", "d"))),))
        draws = [hp["k"] for hp in sample_hyperparams(space, 8000, seed=4)]
        for option in "abcd":
            share = draws.count(option) / len(draws)
            assert 0.21 < share < 0.29

    def test_deterministic_by_seed(self):
        space = SEARCH_SPACES["gbt"]
        assert sample_hyperparams(space, 5, seed=9) == sample_hyperparams(space, 5, seed=9)

    def test_samples_validate(self):
        for space in SEARCH_SPACES.values():
            for hp in sample_hyperparams(space, 64, seed=5):
                space.validate(hp)


class TestEncoding:
    def test_log_lower_bound_encodes_to_zero(self):
        space = SearchSpace("s", (ParamSpec("lr", LogUniform(1e-5, 1.0)),))
        assert encode(space, {"lr": 1e-5})[0] == pytest.approx(0.0, abs=1e-15)

    def test_integer_upper_bound_encodes_to_one(self):
        space = SearchSpace("s", (ParamSpec("d", IntegerUniform(1, 10)),))
        assert encode(space, {"d": 10})[0] == 1.0

    def test_categorical_one_hot_block(self):
        space = SEARCH_SPACES["gp"]
        vec = encode(space, {"n_inducing": 30, "kernel": "matern32", "learning_rate": 1e-5})
        # dims: n_inducing, 4-way kernel block, learning_rate
        assert list(vec[1:5]) == [0.0, 0.0, 1.0, 0.0]

    def test_out_of_range_encode_rejected(self):
        space = SearchSpace("s", (ParamSpec("x", ContinuousUniform(0.0, 1.0)),))
        with pytest.raises(ValueError):
            encode(space, {"x": 1.5})

    def test_round_trip_exact_for_integers_and_categoricals(self):
        for tag in ("gp", "gbt", "rf", "ffn"):
            space = SEARCH_SPACES[tag]
            for hp in sample_hyperparams(space, 40, seed=6):
                back = decode(space, encode(space, hp))
                for p in space.params:
                    if isinstance(p.kind, (IntegerUniform, Categorical)):
                        assert back[p.name] == hp[p.name]

    def test_round_trip_continuous_within_1e12(self):
        space = SEARCH_SPACES["gbt"]
        for hp in sample_hyperparams(space, 40, seed=7):
            back = decode(space, encode(space, hp))
            for p in space.params:
                if isinstance(p.kind, (ContinuousUniform, LogUniform)):
                    assert back[p.name] == pytest.approx(hp[p.name], rel=1e-12, abs=1e-15)


class TestExpectedImprovement:
    def test_zero_sd_no_improvement_is_zero(self):
        assert expected_improvement(1.0, 0.0, 0.0) == 0.0

    def test_at_z_zero_equals_standard_normal_density(self):
        assert abs(expected_improvement(0.0, 1.0, 0.0) - 1.0 / math.sqrt(2 * math.pi)) < 1e-12

    def test_certain_improvement_approaches_gap(self):
        assert expected_improvement(-1.0, 1e-12, 0.0) == pytest.approx(1.0, rel=1e-9)
        assert expected_improvement(-1.0, 0.0, 0.0) == 1.0

    def test_nonnegative_everywhere(self):
        rng = np.random.default_rng(8)
        mu = rng.normal(0, 5, 500)
        sd = np.abs(rng.normal(0, 2, 500))
        ei = expected_improvement(mu, sd, best=0.3)
        assert np.all(ei >= 0.0)

    def test_negative_sd_rejected(self):
        with pytest.raises(ValueError):
            expected_improvement(0.0, -1.0, 0.0)


class TestBayesOptimize:
    def test_budget_equals_n_init_skips_surrogate(self):
        obj = lambda hp: (hp["x"] - 0.5) ** 2  # noqa: E731
        best_hp, hist = bayes_optimize(obj, UNIT, budget=5, n_init=5, seed=0)
        assert len(hist.trials) == 5
        rand = sample_hyperparams(UNIT, 5, seed=hist.trials[0].index * 0 + _init_seed(0))
        assert [t.hp for t in hist.trials] == rand

    def test_constant_objective(self):
        obj = lambda hp: 7.25  # noqa: E731
        best_hp, hist = bayes_optimize(obj, UNIT, budget=6, n_init=3, seed=1)
        assert len(hist.trials) == 6
        assert hist.best_value == 7.25

    def test_history_length_counts_failures(self):
        calls = {"n": 0}

        def flaky(hp):
            calls["n"] += 1
            if calls["n"] % 3 == 0:
                raise RuntimeError("boom")
            return hp["x"]

        _, hist = bayes_optimize(flaky, UNIT, budget=9, n_init=4, seed=2)
        assert len(hist.trials) == 9
        assert any(t.failed for t in hist.trials)

    def test_best_so_far_monotone_nonincreasing(self):
        obj = lambda hp: (hp["x"] - 0.3) ** 2  # noqa: E731
        _, hist = bayes_optimize(obj, UNIT, budget=20, n_init=5, seed=3)
        seq = hist.best_so_far()
        assert all(a >= b for a, b in zip(seq, seq[1:]))

    def test_all_failures_raise_with_history(self):
        def bad(hp):
            raise RuntimeError("always")

        with pytest.raises(HpoError) as err:
            bayes_optimize(bad, UNIT, budget=4, n_init=2, seed=4)
        assert err.value.history is not None
        assert len(err.value.history.trials) == 4

    def test_deterministic_history(self):
        obj = lambda hp: math.sin(9 * hp["x"]) + hp["x"]  # noqa: E731
        _, h1 = bayes_optimize(obj, UNIT, budget=15, n_init=5, seed=5)
        _, h2 = bayes_optimize(obj, UNIT, budget=15, n_init=5, seed=5)
        assert [t.hp for t in h1.trials] == [t.hp for t in h2.trials]
        assert [t.value for t in h1.trials] == [t.value for t in h2.trials]

    def test_beats_matched_random_search_on_quadratic(self):
        wins = 0
        n_seeds = 20
        for seed in range(n_seeds):
            obj = lambda hp: (hp["x"] - 0.3) ** 2  # noqa: E731
            _, hist = bayes_optimize(obj, UNIT, budget=30, n_init=8, seed=seed)
            random_best = min(
                (h["x"] - 0.3) ** 2 for h in sample_hyperparams(UNIT, 30, seed=10_000 + seed)
            )
            wins += hist.best_value <= random_best
        assert wins >= 0.8 * n_seeds

    def test_log_writer_round_trips_values(self):
        obj = lambda hp: hp["x"]  # noqa: E731
        _, hist = bayes_optimize(obj, UNIT, budget=4, n_init=2, seed=6)
        log = hist.to_log()
        assert len(log.strip().splitlines()) == 4
        first = log.splitlines()[0].split("\t")
        assert json.loads(first[1]) == hist.trials[0].hp


def _init_seed(seed: int) -> int:
    from serverlens.hpo import _candidate_seed

    return _candidate_seed(seed, -1)

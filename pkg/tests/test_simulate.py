import numpy as np
import pytest

from flars.cca import PenaltyConfig
from flars.lars import FlarsOptions
from flars.representation import TimeGrid, build_representation
from flars.simulate import (
    ScenarioConfig,
    generate_scenario,
    run_one,
    run_replications,
    selection_metrics,
    true_coefficient_curves,
)


SMALL = dict(n_train=60, n_test=60, grid_q=50)


class TestSelectionMetrics:
    def test_all_true(self):
        assert selection_metrics(["a", "b"], {"a", "b", "c"}) == (100.0, 0.0, False)

    def test_three_of_four(self):
        t, f, empty = selection_metrics(["a", "b", "c", "x"], {"a", "b", "c"})
        assert (t, f, empty) == (75.0, 25.0, False)

    def test_all_false(self):
        assert selection_metrics(["x", "y"], {"a"}) == (0.0, 100.0, False)

    def test_empty_selection_flagged(self):
        t, f, empty = selection_metrics([], {"a"})
        assert (t, f) == (0.0, 0.0)
        assert empty


class TestTrueCurves:
    def test_unit_population_variance(self):
        # Var(int x beta) = beta' (h K h) beta must be 1 after scaling
        grid = np.linspace(0, 1, 80)
        d = grid[:, None] - grid[None, :]
        K = np.exp(-0.5 * (d / 0.2) ** 2)
        h = np.gradient(grid)
        for beta in true_coefficient_curves(grid):
            hb = h * beta
            assert float(hb @ K @ hb) == pytest.approx(1.0, abs=1e-10)

    def test_shapes_preserved(self):
        grid = np.linspace(0, 1, 101)
        sine, bump, ramp = true_coefficient_curves(grid)
        assert sine[0] == pytest.approx(0.0, abs=1e-12)
        assert np.argmax(bump) == 50
        assert ramp[0] < 0 < ramp[-1]

    def test_empirical_contribution_variance(self):
        # draws integrated against a scaled curve have variance close to 1
        cfg = ScenarioConfig(n_functional=1, n_scalar=3, n_true_functional=1,
                             n_true_scalar=0, n_train=4000, n_test=1,
                             noise_sd=0.0, grid_q=100, seed=3)
        train, _, truth = generate_scenario(cfg)
        beta = truth["beta_curves"]["x1"]
        _, x = train["functional"][0]
        contrib = np.trapezoid(x.values * beta, np.linspace(0, 1, 100), axis=1)
        assert np.var(contrib) == pytest.approx(1.0, rel=0.1)


class TestGenerateScenario:
    def test_shapes_and_ids(self):
        cfg = ScenarioConfig.scenario1(**SMALL, seed=1)
        train, test, truth = generate_scenario(cfg)
        assert train["y"].shape == (60,)
        assert test["y"].shape == (60,)
        assert len(train["functional"]) == 7
        assert len(train["scalar"]) == 5
        assert truth["true_ids"] == {"x1", "x2", "x3", "z1", "z2", "z3"}
        assert set(truth["gamma"].values()) == {1.0, -1.0, 0.5}

    def test_deterministic_under_seed(self):
        cfg = ScenarioConfig.scenario1(**SMALL, seed=42)
        a, _, _ = generate_scenario(cfg)
        b, _, _ = generate_scenario(cfg)
        assert np.array_equal(a["y"], b["y"])
        assert np.array_equal(a["functional"][0][1].values,
                              b["functional"][0][1].values)

    def test_seed_changes_data(self):
        a, _, _ = generate_scenario(ScenarioConfig.scenario1(**SMALL, seed=1))
        b, _, _ = generate_scenario(ScenarioConfig.scenario1(**SMALL, seed=2))
        assert not np.array_equal(a["y"], b["y"])

    def test_zero_noise_signal_identity(self):
        cfg = ScenarioConfig.scenario1(**SMALL, noise_sd=0.0, seed=5)
        train, test, _ = generate_scenario(cfg)
        assert np.array_equal(train["y"], train["signal"])
        assert np.array_equal(test["y"], test["signal"])

    def test_noise_level(self):
        cfg = ScenarioConfig.scenario1(n_train=5000, n_test=1, grid_q=50,
                                       noise_sd=0.5, seed=8)
        train, _, _ = generate_scenario(cfg)
        noise = train["y"] - train["signal"]
        assert np.std(noise) == pytest.approx(0.5, rel=0.1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ScenarioConfig(n_functional=2, n_scalar=5)  # 3 true > 2 candidates
        with pytest.raises(ValueError):
            ScenarioConfig.scenario1(noise_sd=-0.1)
        with pytest.raises(ValueError):
            ScenarioConfig.scenario1(grid_q=2)
        with pytest.raises(ValueError):
            ScenarioConfig.scenario1(n_train=1)


class TestRunOne:
    def test_zero_noise_near_perfect_fit(self):
        cfg = ScenarioConfig.scenario1(**SMALL, noise_sd=0.0, seed=2)
        rep = build_representation("GQ", TimeGrid(np.linspace(0, 1, 50)), Q=12)
        row = run_one(cfg, rep, FlarsOptions(stop="cd"))
        assert row.rmse < 0.05
        assert row.true_pct == 100.0
        assert row.false_pct == 0.0

    def test_rmse_floor_is_noise_sd(self):
        # no model can beat the irreducible noise by much
        cfg = ScenarioConfig.scenario1(**SMALL, noise_sd=0.2, seed=4)
        rep = build_representation("GQ", TimeGrid(np.linspace(0, 1, 50)), Q=12)
        row = run_one(cfg, rep, FlarsOptions(stop="cd"))
        assert row.rmse >= 0.9 * 0.2


class TestRunReplications:
    def test_single_replication_aggregate(self):
        cfg = ScenarioConfig.scenario1(**SMALL, seed=6)
        agg = run_replications(cfg, "GQ", FlarsOptions(stop="cd"), n_reps=1,
                               rep_config={"Q": 12})
        assert agg.n_reps == 1
        assert agg.n_failed == 0
        assert len(agg.rows) == 1
        assert agg.mean_rmse == agg.rows[0].rmse

    def test_rows_bit_identical_across_runs(self):
        cfg = ScenarioConfig.scenario1(**SMALL, seed=9)
        kw = dict(options=FlarsOptions(stop="cd"), n_reps=2,
                  rep_config={"Q": 12})
        a = run_replications(cfg, "GQ", **kw)
        b = run_replications(cfg, "GQ", **kw)
        for ra, rb in zip(a.rows, b.rows):
            assert ra.rmse == rb.rmse
            assert ra.selected_ids == rb.selected_ids

    def test_per_rep_seeds_differ(self):
        cfg = ScenarioConfig.scenario1(**SMALL, seed=9)
        agg = run_replications(cfg, "GQ", FlarsOptions(stop="cd"), n_reps=3,
                               rep_config={"Q": 12})
        seeds = [r.seed for r in agg.rows]
        assert len(set(seeds)) == 3

    def test_nreps_validation(self):
        cfg = ScenarioConfig.scenario1(**SMALL)
        with pytest.raises(ValueError):
            run_replications(cfg, "GQ", n_reps=0, rep_config={"Q": 12})

    def test_high_dimensional_scenario_completes(self):
        # p >> n: 100 candidates, 40 training rows
        cfg = ScenarioConfig.scenario2(n_train=40, n_test=40, grid_q=30, seed=1)
        agg = run_replications(cfg, "RDP", FlarsOptions(stop="cd"), n_reps=1)
        assert agg.n_failed == 0
        assert np.isfinite(agg.mean_rmse)

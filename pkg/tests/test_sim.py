import numpy as np
import pytest

from fosrtest.basis import constraint_residual, orthonormal_polynomials
from fosrtest.core import Grid, Regime
from fosrtest.inference import run_test
from fosrtest.sim import (
    SimulationScenario,
    coefficient_functions,
    generate_dataset,
    run_experiment,
    scenario_a_deviation,
    verify_missingness_model,
)


def test_null_coefficients_lie_in_span():
    sc = SimulationScenario(d=0.0)
    ds, _, truth = generate_dataset(sc)
    assert truth.null_holds
    res = constraint_residual(truth.beta, orthonormal_polynomials(4, ds.grid))
    assert np.max(np.abs(res)) < 1e-8
    norms = np.sqrt(ds.grid.integrate(truth.beta**2))
    np.testing.assert_allclose(norms, 1.0, atol=1e-10)


def test_scenario_a_deviation_has_unit_norm_on_fine_grid():
    # On a 100-point grid the high sine terms alias, so the norm is checked
    # against the continuous L2 norm via a fine grid.
    t = np.linspace(0, 1, 40001)
    delta = scenario_a_deviation(t)
    norms = np.sqrt(np.trapezoid(delta**2, t, axis=1))
    np.testing.assert_allclose(norms, 1.0, atol=1e-3)


def test_scenario_b_deviation_is_unit_v5():
    sc = SimulationScenario(scenario="B", d=1.0, tau=0.0)
    g = Grid.uniform(100)
    beta, beta0, _, V = coefficient_functions(sc, g)
    delta = beta - beta0
    np.testing.assert_allclose(delta, np.vstack([V[4]] * 3), atol=1e-12)
    np.testing.assert_allclose(np.sqrt(g.integrate(delta**2)), 1.0, atol=1e-3)


def test_local_alternative_scaling():
    g = Grid.uniform(100)
    b1, b0, _, _ = coefficient_functions(SimulationScenario(scenario="B", d=2.0, tau=0.5, n=64), g)
    np.testing.assert_allclose(b1 - b0, 2.0 * 64 ** (-0.25) * np.vstack([orthonormal_polynomials(5, g).functions[4]] * 3), atol=1e-12)


def test_missing_intervals_mean_length():
    ds, _, truth = generate_dataset(SimulationScenario(n=10_000, regime="partial", seed=4))
    lengths = truth.missing_intervals[:, 1] - truth.missing_intervals[:, 0]
    assert abs(lengths.mean() - 1 / 3) < 0.01
    removed = 1 - ds.mask.mean()
    assert 0.28 < removed < 0.36


def test_same_seed_same_dataset():
    sc = SimulationScenario(regime="composition", n=20, seed=11)
    a, _, _ = generate_dataset(sc)
    b, _, _ = generate_dataset(sc)
    assert a.to_json() == b.to_json()


def test_regimes_share_covariates_and_errors():
    full, dpf, tf = generate_dataset(SimulationScenario(n=30, seed=5))
    part, dpp, tp = generate_dataset(SimulationScenario(n=30, seed=5, regime="partial"))
    np.testing.assert_array_equal(dpf.X, dpp.X)
    np.testing.assert_array_equal(tf.complete, tp.complete)
    np.testing.assert_array_equal(part.values[part.mask == 1], full.values[part.mask == 1])


def test_empty_missing_intervals_reproduce_full_regime():
    sc = SimulationScenario(n=40, seed=8, d=3.0)
    full, dp, _ = generate_dataset(sc)
    part, dp2, _ = generate_dataset(SimulationScenario(n=40, seed=8, d=3.0, regime="partial", empty_missing_intervals=True))
    np.testing.assert_array_equal(full.values, part.values)
    np.testing.assert_array_equal(full.mask, part.mask)
    b = orthonormal_polynomials(4, full.grid)
    r1, r2 = run_test(full, dp, b, B=500, seed=3), run_test(part, dp2, b, B=500, seed=3)
    assert r1.statistic == r2.statistic and r1.p_value == r2.p_value
    np.testing.assert_array_equal(r1.eigenvalues, r2.eigenvalues)


def test_irregular_sampling_design():
    ds, _, _ = generate_dataset(SimulationScenario(n=15, regime="irregular", seed=2))
    for t, y in ds.irregular:
        assert t.size == 80 and np.unique(t).size == 80
        assert np.all(np.isin(t, ds.grid.points))


def test_composition_sampling_respects_missing_interval():
    ds, _, truth = generate_dataset(SimulationScenario(n=50, regime="composition", seed=3))
    for (t, _), (lo, hi) in zip(ds.irregular, truth.missing_intervals):
        assert t.size <= 60
        assert not np.any((t >= lo) & (t <= hi))


def test_noise_is_added_in_irregular_regimes():
    ds, _, truth = generate_dataset(SimulationScenario(n=200, regime="irregular", seed=6, noise_sd=0.5))
    resid = []
    for i, (t, y) in enumerate(ds.irregular):
        idx = np.searchsorted(ds.grid.points, t)
        resid.append(y - truth.complete[i, idx])
    assert abs(np.std(np.concatenate(resid)) - 0.5) < 0.02


@pytest.mark.parametrize(
    "kwargs",
    [{"d": -1}, {"tau": 1.5}, {"k_miss": 0}, {"p_miss": 2}, {"N_obs": 120}, {"n": 2}],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ValueError):
        SimulationScenario(**kwargs)


def test_missingness_model_moments():
    rep = verify_missingness_model(3, 3, draws=100_000, seed=1)
    assert abs(rep.mean_length - 1 / 3) < 0.005
    assert rep.beta_var == pytest.approx(4 * 8 / (12**2 * 13))
    assert abs(rep.var_length / rep.beta_var - 1) < 0.10
    assert rep.disagreement[0] < rep.disagreement[-1]
    assert rep.monotone


def test_missingness_rejects_small_k():
    with pytest.raises(ValueError):
        verify_missingness_model(3, 0, draws=10)


def test_single_replicate():
    res = run_experiment(SimulationScenario(n=30, N_grid=20), 1, B=200, threads=1)
    assert res.rejection_rate in (0.0, 1.0)
    assert res.replicates == 1


def test_experiment_independent_of_workers():
    sc = SimulationScenario(n=30, N_grid=20, d=5.0, seed=12)
    a = run_experiment(sc, 6, B=200, threads=1)
    b = run_experiment(sc, 6, B=200, threads=2)
    assert a.p_values == b.p_values
    assert a.row()["rejections"] == b.row()["rejections"]

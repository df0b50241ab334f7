import numpy as np
import pytest

from fosrtest.core import (
    DesignPair,
    FunctionalDataset,
    Grid,
    Regime,
    StatisticKind,
    TestReport,
    validate_dataset,
)
from fosrtest.regression import orthogonalize


def test_uniform_grid_weights_are_one_over_n():
    g = Grid.uniform(37)
    assert np.all(g.weights == 1.0 / 37)
    assert g.points[0] == 0.0 and g.points[-1] == 1.0


def test_trapezoid_weights_sum_to_one_and_integrate_linear_exactly():
    pts = np.sort(np.r_[0.0, np.random.default_rng(1).random(20), 1.0])
    g = Grid.trapezoid(pts)
    assert abs(g.weights.sum() - 1.0) < 1e-12
    assert abs(g.integrate(pts) - 0.5) < 1e-12


@pytest.mark.parametrize("points", [[0.2, 0.1, 0.5], [0.0, 0.5, 1.2], [-0.1, 0.5], [0.3, 0.3, 0.9]])
def test_grid_rejects_bad_points(points):
    with pytest.raises(ValueError):
        Grid(np.array(points))


def test_partial_constructor_zeroes_unobserved_values():
    g = Grid.uniform(3)
    ds = FunctionalDataset.partial(g, np.ones((2, 3)), [[1, 0, 1], [1, 1, 0]])
    assert ds.values[0, 1] == 0 and ds.values[1, 2] == 0
    assert ds.regime is Regime.PARTIAL


def test_validate_complete_data_is_ok():
    ds = FunctionalDataset.full(Grid.uniform(5), np.arange(20.0).reshape(4, 5))
    out = validate_dataset(ds)
    assert [f.kind for f in out] == ["ok"]


def test_validate_flags_empty_column():
    mask = np.ones((4, 5), dtype=int)
    mask[:, 2] = 0
    ds = FunctionalDataset.partial(Grid.uniform(5), np.ones((4, 5)), mask)
    out = validate_dataset(ds)
    assert [(f.kind, f.column) for f in out] == [("column_unidentifiable", 2)]


def test_validate_flags_value_under_zero_mask():
    mask = np.ones((3, 4), dtype=int)
    mask[1, 3] = 0
    vals = np.zeros((3, 4))
    vals[1, 3] = 1.0
    ds = FunctionalDataset(Grid.uniform(4), vals, mask, Regime.PARTIAL)
    out = validate_dataset(ds)
    assert [(f.kind, f.subject, f.column) for f in out] == [("value_nonzero_under_zero_mask", 1, 3)]


def test_validate_flags_rank_deficiency_with_design():
    # Subjects 2 and 3 sit at the mean of X, so their centered covariate is 0.
    X = np.array([0, 1, 2, 2, 3, 4], dtype=float)[:, None]
    dp = orthogonalize(X, np.ones((6, 1)))
    mask = np.ones((6, 3), dtype=int)
    ds = FunctionalDataset.partial(Grid.uniform(3), np.zeros((6, 3)), mask)
    assert [f.kind for f in validate_dataset(ds, dp)] == ["ok"]
    mask[:, 1] = 0
    mask[[2, 3], 1] = 1
    ds = FunctionalDataset.partial(Grid.uniform(3), np.zeros((6, 3)), mask)
    assert [(f.kind, f.column) for f in validate_dataset(ds, dp)] == [("rank_deficient_at", 1)]


def test_dataset_json_round_trip_is_bit_exact(rng):
    g = Grid.trapezoid(np.sort(np.r_[0.0, rng.random(7), 1.0]))
    vals = rng.normal(size=(4, g.size)) * 1e-7 + np.pi
    mask = (rng.random((4, g.size)) < 0.6).astype(int)
    ds = FunctionalDataset.partial(g, vals, mask)
    back = FunctionalDataset.from_json(ds.to_json())
    assert np.array_equal(back.values, ds.values)
    assert np.array_equal(back.mask, ds.mask)
    assert np.array_equal(back.grid.points, g.points)
    assert np.array_equal(back.grid.weights, g.weights)
    assert back.regime is ds.regime


def test_irregular_dataset_round_trip(rng):
    g = Grid.uniform(11)
    pairs = [(np.sort(rng.random(5)), rng.normal(size=5)) for _ in range(3)]
    ds = FunctionalDataset.from_irregular(g, pairs, "composition", subject_ids=["a", "b", "c"])
    back = FunctionalDataset.from_json(ds.to_json())
    assert back.regime is Regime.PARTIAL_IRREGULAR_NOISY
    assert back.subject_ids == ("a", "b", "c")
    for (t0, y0), (t1, y1) in zip(ds.irregular, back.irregular):
        assert np.array_equal(t0, t1) and np.array_equal(y0, y1)


def test_regime_aliases():
    assert Regime.parse("Full") is Regime.FULL
    assert Regime.parse("composition") is Regime.PARTIAL_IRREGULAR_NOISY
    assert Regime.parse("irregular").irregular_sampling
    with pytest.raises(ValueError):
        Regime.parse("sometimes")


def test_design_pair_orthogonality(rng):
    X, Z = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    dp = orthogonalize(X, Z)
    assert isinstance(dp, DesignPair)
    assert np.max(np.abs(dp.Xtilde.T @ dp.Z)) < 1e-8 * 20
    np.testing.assert_allclose(dp.gram, dp.Xtilde.T @ dp.Xtilde)


def test_report_json_round_trip():
    rep = TestReport(
        statistic=1.5,
        statistic_kind=StatisticKind.TN_STANDARDIZED,
        eigenvalues=np.array([2.0, 0.5]),
        null_draws=1000,
        p_value=0.2,
        critical_value=3.1,
        alpha=0.05,
        seed=9,
        reject=False,
        diagnostics={"bandwidth": 0.1, "interpolated_columns": [3]},
    )
    back = TestReport.from_json(rep.to_json())
    assert back.statistic == rep.statistic and back.statistic_kind is rep.statistic_kind
    np.testing.assert_array_equal(back.eigenvalues, rep.eigenvalues)
    assert back.diagnostics == rep.diagnostics

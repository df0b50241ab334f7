import numpy as np
import pytest

from fosrtest.core import FunctionalDataset, Grid, RankError, SparsityError
from fosrtest.regression import orthogonalize, pointwise_wls

from conftest import random_problem


def brute_force_global(ds, dp):
    out = np.zeros((dp.p, ds.grid.size))
    for m in range(ds.grid.size):
        o = ds.mask[:, m] == 1
        Xo = dp.Xtilde[o]
        out[:, m] = np.linalg.solve(Xo.T @ Xo, Xo.T @ ds.values[o, m])
    return out


def brute_force_local(ds, dp):
    A = np.hstack([dp.X, dp.Z])
    out = np.zeros((A.shape[1], ds.grid.size))
    for m in range(ds.grid.size):
        o = ds.mask[:, m] == 1
        out[:, m] = np.linalg.solve(A[o].T @ A[o], A[o].T @ ds.values[o, m])
    return out


def test_intercept_centering():
    X = np.array([[1.0], [2.0], [4.0], [9.0]])
    dp = orthogonalize(X, np.ones((4, 1)))
    np.testing.assert_allclose(dp.Xtilde, X - X.mean(), atol=1e-14)


def test_x_in_span_of_z_gives_zero_xtilde_and_rank_error():
    n = 8
    Z = np.column_stack([np.ones(n), np.arange(n)])
    dp = orthogonalize(2 * Z[:, 1:] + 1, Z)
    assert np.max(np.abs(dp.Xtilde)) < 1e-10
    ds = FunctionalDataset.full(Grid.uniform(4), np.random.default_rng(0).normal(size=(n, 4)))
    with pytest.raises(RankError):
        pointwise_wls(ds, dp)


def test_rank_deficient_z_names_columns():
    Z = np.column_stack([np.ones(6), np.arange(6.0), np.ones(6) * 3])
    with pytest.raises(RankError, match=r"\[2\]"):
        orthogonalize(np.ones((6, 1)), Z)


def test_random_orthogonality(rng):
    X, Z = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    dp = orthogonalize(X, Z)
    assert np.max(np.abs(dp.Xtilde.T @ Z)) < 1e-8 * 20
    # column space of [Xtilde, Z] equals that of [X, Z]
    both = np.hstack([X, Z])
    proj = both @ np.linalg.pinv(both)
    np.testing.assert_allclose(proj @ dp.Xtilde, dp.Xtilde, atol=1e-10)


def test_full_data_slope_is_per_column_ols(rng):
    n, N = 25, 7
    x = rng.normal(size=n)
    Y = rng.normal(size=(n, N)) + np.outer(x, np.linspace(-1, 1, N))
    dp = orthogonalize(x[:, None], np.ones((n, 1)))
    fit = pointwise_wls(FunctionalDataset.full(Grid.uniform(N), Y), dp)
    xc = x - x.mean()
    slopes = [np.sum(xc * (Y[:, m] - Y[:, m].mean())) / np.sum(xc**2) for m in range(N)]
    np.testing.assert_allclose(fit.beta_hat[0], slopes, atol=1e-10)


def test_intercept_only_partial_is_observed_mean(rng):
    n, N = 12, 5
    Y = rng.normal(size=(n, N))
    mask = (rng.random((n, N)) < 0.6).astype(int)
    mask[0] = 1
    ds = FunctionalDataset.partial(Grid.uniform(N), Y, mask)
    fit = pointwise_wls(ds, orthogonalize(np.ones((n, 1))))
    means = [Y[mask[:, m] == 1, m].mean() for m in range(N)]
    np.testing.assert_allclose(fit.beta_hat[0], means, atol=1e-12)


def test_empty_column_is_interpolated(rng):
    n, N = 15, 11
    Y = rng.normal(size=(n, N))
    mask = np.ones((n, N), dtype=int)
    mask[:, 4] = 0
    ds = FunctionalDataset.partial(Grid.uniform(N), Y, mask)
    fit = pointwise_wls(ds, orthogonalize(rng.normal(size=(n, 1)), np.ones((n, 1))))
    assert fit.interpolated_columns == (4,)
    np.testing.assert_allclose(fit.beta_hat[:, 4], 0.5 * (fit.beta_hat[:, 3] + fit.beta_hat[:, 5]), atol=1e-12)
    assert np.all(fit.residuals[:, 4] == 0)
    with pytest.raises(SparsityError):
        pointwise_wls(ds, orthogonalize(rng.normal(size=(n, 1)), np.ones((n, 1))), interpolate=False)


def test_boundary_column_is_held_constant(rng):
    n, N = 15, 11
    mask = np.ones((n, N), dtype=int)
    mask[:, 0] = 0
    ds = FunctionalDataset.partial(Grid.uniform(N), rng.normal(size=(n, N)), mask)
    fit = pointwise_wls(ds, orthogonalize(rng.normal(size=(n, 1))))
    np.testing.assert_allclose(fit.beta_hat[:, 0], fit.beta_hat[:, 1])


def test_too_many_interpolated_columns(rng):
    n, N = 10, 10
    mask = np.ones((n, N), dtype=int)
    mask[:, :3] = 0
    ds = FunctionalDataset.partial(Grid.uniform(N), rng.normal(size=(n, N)), mask)
    with pytest.raises(SparsityError, match="too sparse"):
        pointwise_wls(ds, orthogonalize(rng.normal(size=(n, 1))))


@pytest.mark.parametrize("method", ["global", "local"])
def test_matches_brute_force(rng, method):
    ds, dp = random_problem(rng, n=12, N=6, p=2, q=2, observe=0.8)
    fit = pointwise_wls(ds, dp, method=method)
    if method == "global":
        np.testing.assert_allclose(fit.beta_hat, brute_force_global(ds, dp), atol=1e-8)
    else:
        np.testing.assert_allclose(fit.beta_hat, brute_force_local(ds, dp)[: dp.p], atol=1e-8)


def test_coefficient_maps_reproduce_estimates(rng):
    ds, dp = random_problem(rng, n=20, N=8, p=2, q=2)
    for method in ("global", "local"):
        fit = pointwise_wls(ds, dp, method=method)
        np.testing.assert_allclose(np.einsum("mji,im->jm", fit.coef_maps, ds.values), fit.beta_hat, atol=1e-10)


def test_leverage_is_hat_diagonal(rng):
    ds, dp = random_problem(rng, n=14, N=4, p=1, q=2)
    fit = pointwise_wls(ds, dp, method="local")
    A = np.hstack([dp.X, dp.Z])
    for m in range(4):
        o = ds.mask[:, m] == 1
        H = A[o] @ np.linalg.solve(A[o].T @ A[o], A[o].T)
        np.testing.assert_allclose(fit.leverage[o, m], np.diag(H), atol=1e-10)
        assert np.all(fit.leverage[~o, m] == 0)


def test_full_data_nuisance_invariance(rng):
    n, N = 30, 9
    X, Z = rng.normal(size=(n, 2)), np.column_stack([np.ones(n), rng.normal(size=n)])
    dp = orthogonalize(X, Z)
    Y = rng.normal(size=(n, N))
    a = rng.normal(size=(2, N))
    g = Grid.uniform(N)
    b1 = pointwise_wls(FunctionalDataset.full(g, Y), dp).beta_hat
    b2 = pointwise_wls(FunctionalDataset.full(g, Y + Z @ a), dp).beta_hat
    np.testing.assert_allclose(b1, b2, atol=1e-8)


def test_residual_orthogonality_full_data(rng):
    n, N = 30, 6
    dp = orthogonalize(rng.normal(size=(n, 2)), np.column_stack([np.ones(n), rng.normal(size=n)]))
    fit = pointwise_wls(FunctionalDataset.full(Grid.uniform(N), rng.normal(size=(n, N))), dp)
    assert np.max(np.abs(dp.Xtilde.T @ fit.residuals)) < 1e-8
    assert np.max(np.abs(dp.Z.T @ fit.residuals)) < 1e-8


def test_residual_orthogonality_partial_local(rng):
    ds, dp = random_problem(rng, n=30, N=8, p=2, q=2)
    fit = pointwise_wls(ds, dp, method="local")
    W = ds.mask.astype(float)
    for M in (dp.Xtilde, dp.Z):
        assert np.max(np.abs(M.T @ (W * fit.residuals))) < 1e-8


def test_fitted_mean_identity(rng):
    # Xtilde beta + Z eta equals X beta + Z alpha: residuals are those of the joint fit.
    ds, dp = random_problem(rng, n=25, N=5, p=2, q=2)
    fit = pointwise_wls(ds, dp, method="local")
    coef = brute_force_local(ds, dp)
    A = np.hstack([dp.X, dp.Z])
    np.testing.assert_allclose(fit.residuals, ds.mask * (ds.values - A @ coef), atol=1e-9)


def test_methods_agree_on_complete_data(rng):
    n, N = 20, 6
    dp = orthogonalize(rng.normal(size=(n, 2)), np.column_stack([np.ones(n), rng.normal(size=n)]))
    ds = FunctionalDataset.full(Grid.uniform(N), rng.normal(size=(n, N)))
    a, b = pointwise_wls(ds, dp, method="global"), pointwise_wls(ds, dp, method="local")
    np.testing.assert_allclose(a.beta_hat, b.beta_hat, atol=1e-10)
    np.testing.assert_allclose(a.eta_hat, b.eta_hat, atol=1e-10)
    np.testing.assert_allclose(a.residuals, b.residuals, atol=1e-10)


def test_design_size_mismatch():
    ds = FunctionalDataset.full(Grid.uniform(3), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        pointwise_wls(ds, orthogonalize(np.ones((5, 1))))

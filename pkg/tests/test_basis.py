import numpy as np
import pytest
from scipy.stats import ortho_group

from fosrtest.basis import (
    BasisKind,
    constraint_residual,
    custom_basis,
    empty_basis,
    orthonormal_polynomials,
    parse_hypothesis,
    piecewise_linear_basis,
    project,
    projector_matrix,
)
from fosrtest.core import Grid, RankError


def test_first_polynomial_is_constant_one():
    b = orthonormal_polynomials(1, Grid.uniform(50))
    np.testing.assert_allclose(b.functions[0], 1.0, atol=1e-12)


def test_second_polynomial_matches_sqrt12_centered_line():
    # On a fine grid the quadrature orthonormal line approaches sqrt(12) (t - 1/2).
    g = Grid.uniform(20001)
    v2 = orthonormal_polynomials(2, g).functions[1]
    np.testing.assert_allclose(v2, np.sqrt(12.0) * (g.points - 0.5), atol=1e-3)


def test_polynomial_gram_is_identity():
    b = orthonormal_polynomials(4, Grid.uniform(100))
    np.testing.assert_allclose(b.gram(), np.eye(4), atol=1e-8)


def test_polynomial_sign_convention():
    g = Grid.uniform(100)
    b = orthonormal_polynomials(5, g)
    for l in range(5):
        assert g.inner(b.functions[l], g.points**l) > 0


def test_too_many_polynomials_is_a_rank_error():
    with pytest.raises(RankError):
        orthonormal_polynomials(6, Grid.uniform(5))


def test_two_knot_basis_spans_lines():
    g = Grid.uniform(100)
    b = piecewise_linear_basis([0.0, 1.0], g)
    np.testing.assert_allclose(project(g.points[None, :], b), g.points[None, :], atol=1e-8)
    poly = orthonormal_polynomials(2, g)
    beta = np.random.default_rng(0).normal(size=(3, 100))
    np.testing.assert_allclose(project(beta, b), project(beta, poly), atol=1e-8)


def test_three_knot_basis_is_orthonormal():
    b = piecewise_linear_basis([0.0, 0.5, 1.0], Grid.uniform(100))
    assert b.r == 3 and b.kind is BasisKind.PIECEWISE_LINEAR
    np.testing.assert_allclose(b.gram(), np.eye(3), atol=1e-8)


@pytest.mark.parametrize("knots", [[0.0, 0.5, 0.5, 1.0], [0.0], [0.1, 1.0], [0.0, 0.7, 0.3, 1.0]])
def test_bad_knots_rejected(knots):
    with pytest.raises(ValueError):
        piecewise_linear_basis(knots, Grid.uniform(50))


def test_projection_fixes_span_member():
    b = orthonormal_polynomials(3, Grid.uniform(64))
    beta = b.functions[:1]
    np.testing.assert_allclose(project(beta, b), beta, atol=1e-10)
    np.testing.assert_allclose(constraint_residual(beta, b), 0.0, atol=1e-10)


def test_sine_projects_to_zero_on_constants():
    g = Grid.uniform(100)
    b = orthonormal_polynomials(1, g)
    s = np.sqrt(2.0) * np.sin(2 * np.pi * g.points)
    # <sin, 1> under the grid quadrature: the sum over a full period sample is exact up to the endpoint.
    expected = np.full_like(s, g.inner(s, np.ones_like(s)))
    np.testing.assert_allclose(project(s[None], b)[0], expected, atol=1e-12)
    assert np.max(np.abs(expected)) < 1e-12
    v1 = b.functions[0]
    np.testing.assert_allclose(project((v1 + s)[None], b)[0], v1, atol=1e-12)


def test_empty_basis_behaviour():
    g = Grid.uniform(10)
    b = empty_basis(g)
    beta = np.arange(20.0).reshape(2, 10)
    np.testing.assert_array_equal(project(beta, b), 0.0)
    np.testing.assert_array_equal(constraint_residual(beta, b), beta)


def test_residual_orthogonal_to_basis(rng):
    g = Grid.uniform(80)
    b = orthonormal_polynomials(4, g)
    beta = rng.normal(size=(3, 80))
    res = constraint_residual(beta, b)
    assert np.max(np.abs((res * g.weights) @ b.functions.T)) < 1e-8


def test_grid_mismatch_raises():
    b = orthonormal_polynomials(2, Grid.uniform(10))
    with pytest.raises(ValueError):
        project(np.ones((1, 11)), b)
    with pytest.raises(ValueError):
        constraint_residual(np.ones((1, 10)), b, grid=Grid(np.linspace(0, 0.9, 10)))


def test_projector_matrix_matches_project(rng):
    b = piecewise_linear_basis([0, 0.3, 1], Grid.uniform(30))
    f = rng.normal(size=30)
    np.testing.assert_allclose(projector_matrix(b) @ f, project(f[None], b)[0], atol=1e-12)


def test_custom_basis_orthonormalizes_and_detects_dependence():
    g = Grid.uniform(40)
    raw = np.vstack([np.ones(40), g.points, 2 * g.points + 1])
    with pytest.raises(RankError):
        custom_basis(raw, g)
    b = custom_basis(raw[:2], g)
    np.testing.assert_allclose(b.gram(), np.eye(2), atol=1e-10)


@pytest.mark.parametrize(
    "spec,r,kind",
    [("zero", 0, BasisKind.EMPTY), ("poly:4", 4, BasisKind.POLYNOMIAL), ("pwlinear:0,0.5,1", 3, BasisKind.PIECEWISE_LINEAR)],
)
def test_parse_hypothesis(spec, r, kind):
    b = parse_hypothesis(spec, Grid.uniform(20))
    assert b.r == r and b.kind is kind


@pytest.mark.parametrize("spec", ["poly:x", "spline:3", "pwlinear:0,a,1"])
def test_parse_hypothesis_errors(spec):
    with pytest.raises(ValueError):
        parse_hypothesis(spec, Grid.uniform(20))


def test_rotation_leaves_projection_unchanged(rng):
    b = orthonormal_polynomials(3, Grid.uniform(50))
    R = ortho_group.rvs(3, random_state=3)
    beta = rng.normal(size=(2, 50))
    np.testing.assert_allclose(project(beta, b.rotated(R)), project(beta, b), atol=1e-8)

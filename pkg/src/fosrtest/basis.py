"""Orthonormal bases spanning the null space, and the projection operators.

A :class:`BasisSet` stores ``r`` functions evaluated on a grid, orthonormal
with respect to the grid quadrature. ``project`` applies the operator
``L beta = sum_l <beta, v_l> v_l`` row-wise and ``constraint_residual`` applies
``C = I - L``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Grid, RankError

ORTHO_TOL = 1e-6


class BasisKind(str, enum.Enum):
    POLYNOMIAL = "polynomial"
    PIECEWISE_LINEAR = "piecewise_linear"
    CUSTOM = "custom"
    EMPTY = "empty"


@dataclass(frozen=True, eq=False)
class BasisSet:
    grid: Grid
    functions: np.ndarray
    kind: BasisKind
    knots: Optional[tuple] = None

    def __post_init__(self):
        f = np.asarray(self.functions, dtype=float).reshape(-1, self.grid.size)
        f.setflags(write=False)
        object.__setattr__(self, "functions", f)

    @property
    def r(self) -> int:
        return self.functions.shape[0]

    def gram(self) -> np.ndarray:
        f = self.functions
        return (f * self.grid.weights) @ f.T

    def rotated(self, rotation: np.ndarray) -> "BasisSet":
        """Same span, functions replaced by ``rotation @ functions``."""
        return BasisSet(self.grid, np.asarray(rotation) @ self.functions, self.kind, self.knots)


def empty_basis(grid: Grid) -> BasisSet:
    """The zero-dimensional span; the hypothesis becomes ``beta = 0``."""
    return BasisSet(grid, np.zeros((0, grid.size)), BasisKind.EMPTY)


def gram_schmidt(raw: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt with one reorthogonalization pass.

    Rows of ``raw`` are orthonormalized in order under ``<f, g> = sum w f g``.
    Raises :class:`RankError` if a row is (numerically) in the span of the
    previous ones.
    """
    raw = np.array(raw, dtype=float, copy=True)
    out = np.zeros_like(raw)
    for k in range(raw.shape[0]):
        v = raw[k]
        norm0 = np.sqrt(np.sum(weights * v * v))
        for _ in range(2):
            for j in range(k):
                v = v - np.sum(weights * v * out[j]) * out[j]
        norm = np.sqrt(np.sum(weights * v * v))
        if norm0 == 0 or norm <= 1e-10 * norm0:
            raise RankError(f"basis function {k + 1} is linearly dependent on the previous ones on this grid")
        out[k] = v / norm
    gram = (out * weights) @ out.T
    err = np.max(np.abs(gram - np.eye(len(out)))) if len(out) else 0.0
    if err > ORTHO_TOL:
        raise RankError(f"Gram-Schmidt lost orthogonality ({err:.2e})")
    return out


def orthonormal_polynomials(r: int, grid: Grid) -> BasisSet:
    """Orthonormal polynomials of degree ``< r`` on ``grid``.

    Gram-Schmidt runs in degree order, so ``v_1`` is constant, ``v_2`` linear
    and so on, each with a positive leading coefficient.
    """
    if r < 1:
        raise ValueError("r must be at least 1 (use empty_basis for r = 0)")
    if r > grid.size:
        raise RankError(f"cannot build {r} polynomials on a grid of {grid.size} points")
    # (2t - 1)^k spans the same nested spaces as t^k and is better conditioned.
    x = 2.0 * grid.points - 1.0
    raw = np.vstack([x**k for k in range(r)])
    return BasisSet(grid, gram_schmidt(raw, grid.weights), BasisKind.POLYNOMIAL)


def hat_functions(knots: Sequence[float], t: np.ndarray) -> np.ndarray:
    """Piecewise-linear B-splines (hat functions) at ``knots`` evaluated at ``t``."""
    knots = np.asarray(knots, dtype=float)
    eye = np.eye(knots.size)
    return np.vstack([np.interp(t, knots, eye[k]) for k in range(knots.size)])


def piecewise_linear_basis(knots: Sequence[float], grid: Grid) -> BasisSet:
    """Orthonormalized hat functions with the given knots (which must include 0 and 1)."""
    knots = np.asarray(knots, dtype=float).ravel()
    if knots.size < 2:
        raise ValueError("need at least two knots")
    if np.any(np.diff(knots) <= 0):
        raise ValueError("knots must be strictly increasing (no duplicates)")
    if knots[0] != 0.0 or knots[-1] != 1.0:
        raise ValueError("knots must include 0 and 1")
    if knots.size > grid.size:
        raise RankError("more knots than grid points")
    raw = hat_functions(knots, grid.points)
    return BasisSet(grid, gram_schmidt(raw, grid.weights), BasisKind.PIECEWISE_LINEAR, tuple(knots))


def custom_basis(functions, grid: Grid) -> BasisSet:
    """Orthonormalize arbitrary functions (rows, evaluated on ``grid``)."""
    raw = np.atleast_2d(np.asarray(functions, dtype=float))
    if raw.shape[1] != grid.size:
        raise ValueError("functions must be evaluated on the grid")
    if raw.shape[0] == 0:
        return empty_basis(grid)
    return BasisSet(grid, gram_schmidt(raw, grid.weights), BasisKind.CUSTOM)


def _check(beta: np.ndarray, basis: BasisSet, grid: Optional[Grid]) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if grid is not None and not grid.same_as(basis.grid):
        raise ValueError("grid mismatch between coefficients and basis")
    if beta.shape[-1] != basis.grid.size:
        raise ValueError(f"grid mismatch: coefficients have {beta.shape[-1]} points, basis has {basis.grid.size}")
    return beta


def basis_coefficients(beta, basis: BasisSet, grid: Optional[Grid] = None) -> np.ndarray:
    """Inner products ``<beta_j, v_l>``; shape ``(..., r)``."""
    beta = _check(beta, basis, grid)
    return (beta * basis.grid.weights) @ basis.functions.T


def project(beta, basis: BasisSet, grid: Optional[Grid] = None) -> np.ndarray:
    """Apply ``L`` to every row of ``beta`` (last axis is the grid)."""
    beta = _check(beta, basis, grid)
    if basis.r == 0:
        return np.zeros_like(beta)
    return basis_coefficients(beta, basis) @ basis.functions


def constraint_residual(beta, basis: BasisSet, grid: Optional[Grid] = None) -> np.ndarray:
    """``C beta = beta - L beta``; the part of ``beta`` outside the null span."""
    beta = _check(beta, basis, grid)
    return beta - project(beta, basis)


def projector_matrix(basis: BasisSet) -> np.ndarray:
    """``N x N`` matrix ``P`` with ``P @ f == project(f)`` for a column vector ``f``."""
    v = basis.functions
    return v.T @ (v * basis.grid.weights)


def parse_hypothesis(spec: str, grid: Grid) -> BasisSet:
    """Build a basis from ``zero``, ``poly:R`` or ``pwlinear:k0,k1,...``."""
    spec = spec.strip().lower()
    if spec in ("zero", "none", "empty", "poly:0"):
        return empty_basis(grid)
    kind, _, arg = spec.partition(":")
    if kind in ("poly", "polynomial"):
        try:
            r = int(arg)
        except ValueError:
            raise ValueError(f"bad polynomial order in hypothesis {spec!r}") from None
        return orthonormal_polynomials(r, grid)
    if kind in ("pwlinear", "piecewise", "pl"):
        try:
            knots = [float(k) for k in arg.split(",") if k.strip()]
        except ValueError:
            raise ValueError(f"bad knot list in hypothesis {spec!r}") from None
        return piecewise_linear_basis(knots, grid)
    raise ValueError(f"unrecognized hypothesis {spec!r}; use zero, poly:R or pwlinear:k0,...,1")

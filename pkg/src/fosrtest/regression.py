"""Design orthogonalization and pointwise weighted least squares."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DesignPair, FunctionalDataset, RankError, SparsityError

RCOND_MIN = 1e-10
MAX_INTERPOLATED_FRACTION = 0.2


@dataclass(frozen=True, eq=False)
class RegressionFit:
    """Pointwise coefficient estimates and masked residual curves.

    Attributes
    ----------
    beta_hat : ndarray, shape (p, N)
    eta_hat : ndarray, shape (q, N)
    residuals : ndarray, shape (n, N)
        ``delta_i(t_m) * (Y_i - Xtilde_i beta_hat - Z_i eta_hat)``; zero where
        unobserved.
    effective_n : ndarray, shape (N,)
        Number of observed subjects at each grid point.
    interpolated_columns : tuple of int
        Grid points where the weighted Gram matrix was not invertible and the
        estimates were interpolated from solvable neighbours.
    leverage : ndarray, shape (n, N), optional
        Diagonal of the weighted hat matrix of ``[X, Z]`` at each grid point;
        zero where unobserved.
    coef_maps : ndarray, shape (N, p, n), optional
        Linear maps with ``beta_hat[:, m] == coef_maps[m] @ Y[:, m]``.
    """

    beta_hat: np.ndarray
    eta_hat: np.ndarray
    residuals: np.ndarray
    effective_n: np.ndarray
    interpolated_columns: tuple = field(default=())
    leverage: Optional[np.ndarray] = None
    coef_maps: Optional[np.ndarray] = None


def _column_rank_check(Z: np.ndarray, name: str = "Z") -> None:
    if Z.shape[1] == 0:
        return
    rank = np.linalg.matrix_rank(Z)
    if rank == Z.shape[1]:
        return
    # Name the columns that add nothing to the span of the ones kept before them.
    kept, offending = [], []
    for j in range(Z.shape[1]):
        if np.linalg.matrix_rank(Z[:, kept + [j]]) > len(kept):
            kept.append(j)
        else:
            offending.append(j)
    raise RankError(f"{name} is rank deficient (rank {rank} < {Z.shape[1]}); dependent columns: {offending}")


def orthogonalize(X, Z=None, x_names=None, z_names=None) -> DesignPair:
    """Return the design pair with ``Xtilde = (I - Z (Z^T Z)^{-1} Z^T) X``.

    ``Z`` may be ``None`` or have zero columns, in which case ``Xtilde = X``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Z is None:
        Z = np.zeros((X.shape[0], 0))
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != X.shape[0]:
        raise ValueError("X and Z must have the same number of rows")
    _column_rank_check(Z)
    if Z.shape[1]:
        coef, *_ = np.linalg.lstsq(Z, X, rcond=None)
        Xtilde = X - Z @ coef
    else:
        Xtilde = X.copy()
    return DesignPair(X, Z, Xtilde, x_names, z_names)


def _weighted_grams(A: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``A^T W(t_m) A`` for every grid point; shape (N, k, k)."""
    return np.einsum("im,ij,ik->mjk", mask.astype(float), A, A, optimize=True)


def _pinv_batched(grams: np.ndarray, rcond: float, scale: Optional[float] = None):
    """Pseudo-inverse of every matrix in a stack, with reciprocal condition numbers.

    The condition number is measured against ``scale`` when given (the largest
    singular value of the unmasked Gram matrix), so that a matrix that is zero
    up to roundoff is not mistaken for a well-conditioned one.
    """
    u, s, vt = np.linalg.svd(grams)
    smax = s[:, :1]
    ref = smax[:, 0] if scale is None else np.full(len(s), float(scale))
    rc = np.divide(s[:, -1], ref, out=np.zeros(len(s)), where=ref > 0)
    inv_s = np.divide(1.0, s, out=np.zeros_like(s), where=s > rcond * smax)
    inv = np.einsum("mji,mj,mkj->mik", vt, inv_s, u)
    return inv, rc


def column_conditions(A: np.ndarray, mask: np.ndarray, reference: Optional[np.ndarray] = None) -> np.ndarray:
    """Reciprocal condition number of ``A^T W(t_m) A`` at every grid point.

    Smallest singular value over the largest singular value of
    ``reference^T reference`` (default ``A``). Pass the raw ``X`` as reference
    for ``Xtilde`` so that an ``Xtilde`` that vanishes counts as singular.
    """
    if A.shape[1] == 0:
        return np.ones(mask.shape[1])
    scale = np.linalg.norm(A if reference is None else reference, 2) ** 2
    s = np.linalg.svd(_weighted_grams(A, mask), compute_uv=False)
    return s[:, -1] / scale if scale > 0 else np.zeros(mask.shape[1])


def _pinv_solve(grams: np.ndarray, rhs: np.ndarray, rcond: float):
    """Solve ``grams[m] x = rhs[m]`` through an SVD of each matrix.

    Returns the solutions and the reciprocal condition numbers.
    """
    inv, rc = _pinv_batched(grams, rcond)
    return np.einsum("mjk,mk->mj", inv, rhs), rc


def _interpolate_columns(est: np.ndarray, good: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Linear interpolation in t across bad columns; constant beyond the ends."""
    out = est.copy()
    if good.all():
        return out
    for row in range(est.shape[0]):
        out[row, ~good] = np.interp(points[~good], points[good], est[row, good])
    return out


def _check_bad_columns(good: np.ndarray, interpolate: bool, N: int) -> tuple:
    bad_cols = tuple(int(m) for m in np.flatnonzero(~good))
    if bad_cols:
        if not interpolate:
            raise SparsityError(f"weighted Gram matrix is singular at grid columns {list(bad_cols)}")
        if not good.any():
            raise RankError("no grid point identifies the tested coefficients (is X in the span of Z?)")
        if len(bad_cols) > MAX_INTERPOLATED_FRACTION * N:
            raise SparsityError(
                f"{len(bad_cols)} of {N} grid columns are unidentifiable; "
                "the dataset is too sparse for the pointwise estimator"
            )
    return bad_cols


def pointwise_wls(ds: FunctionalDataset, dp: DesignPair, interpolate: bool = True, method: str = "global") -> RegressionFit:
    """Pointwise weighted least squares under the observation mask.

    Parameters
    ----------
    method : {"global", "local"}
        ``"global"`` computes ``beta_hat = (Xtilde^T W Xtilde)^{-1} Xtilde^T W Y``
        at each grid point with ``W = diag(mask[:, m])`` and the sample-wide
        ``Xtilde``; the nuisance fit is the weighted least-squares coefficient
        of ``Y - X beta_hat`` on ``Z``. ``"local"`` fits ``[X, Z]`` jointly by
        weighted least squares at each grid point, which is the same as
        orthogonalizing ``X`` against ``Z`` among the subjects observed there.
        Both agree when the mask is complete.

    In both cases ``eta_hat`` is reported in the ``Xtilde`` parametrization,
    shifted by ``(Z^T Z)^{-1} Z^T X beta_hat`` so that
    ``Xtilde beta + Z eta = X beta + Z alpha``.
    """
    if dp.n != ds.n:
        raise ValueError(f"design has {dp.n} rows but the dataset has {ds.n} curves")
    if method not in ("global", "local"):
        raise ValueError(f"unknown method {method!r}; use 'global' or 'local'")
    mask = ds.mask.astype(float)
    Y = ds.values * mask
    X, Z, Xt = dp.X, dp.Z, dp.Xtilde
    n, N = Y.shape
    p, q = dp.p, dp.q
    A = np.hstack([X, Z])

    joint_inv, joint_rc = _pinv_batched(_weighted_grams(A, mask), RCOND_MIN, np.linalg.norm(A, 2) ** 2)
    if method == "local":
        inv, rc = joint_inv, joint_rc
        maps_all = np.einsum("mjk,ik,im->mji", inv, A, mask)  # (N, p+q, n)
        coef = np.einsum("mji,im->jm", maps_all, Y)
        beta, alpha = coef[:p], coef[p:]
        maps = maps_all[:, :p]
    else:
        inv, rc = _pinv_batched(_weighted_grams(Xt, mask), RCOND_MIN, np.linalg.norm(X, 2) ** 2)
        maps = np.einsum("mjk,ik,im->mji", inv, Xt, mask)  # (N, p, n)
        beta = np.einsum("mji,im->jm", maps, Y)
        if q:
            partial_resid = Y - mask * (X @ beta)
            alpha, _ = _pinv_solve(_weighted_grams(Z, mask), (Z.T @ partial_resid).T, RCOND_MIN)
            alpha = alpha.T
        else:
            alpha = np.zeros((0, N))
    good = rc >= RCOND_MIN
    bad_cols = _check_bad_columns(good, interpolate, N)

    eta = alpha + np.linalg.lstsq(Z, X, rcond=None)[0] @ beta if q else np.zeros((0, N))
    leverage = mask * np.einsum("ij,mjk,ik->im", A, joint_inv, A)

    if bad_cols:
        points = ds.grid.points
        beta = _interpolate_columns(beta, good, points)
        if q:
            eta = _interpolate_columns(eta, good, points)
        flat = maps.reshape(N, -1).T
        maps = _interpolate_columns(flat, good, points).T.reshape(maps.shape)
        leverage[:, ~good] = 0.0

    fitted = Xt @ beta + Z @ eta
    residuals = mask * (Y - fitted)
    return RegressionFit(
        beta_hat=beta,
        eta_hat=eta,
        residuals=residuals,
        effective_n=ds.mask.sum(axis=0).astype(int),
        interpolated_columns=bad_cols,
        leverage=leverage,
        coef_maps=maps,
    )

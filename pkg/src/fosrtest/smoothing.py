"""Kernel reconstruction of discretely observed curves and covariance surfaces."""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import FunctionalDataset, Grid, SparsityError
from .regression import RegressionFit

MAX_EMPTY_CELL_FRACTION = 0.2
TIE_RTOL = 1e-9


class KernelFamily(str, enum.Enum):
    EPANECHNIKOV = "epanechnikov"
    GAUSSIAN = "gaussian"


def kernel_profile(family: KernelFamily, u: np.ndarray) -> np.ndarray:
    """Unscaled kernel ``K(u)``; a symmetric density."""
    family = KernelFamily(family)
    if family is KernelFamily.EPANECHNIKOV:
        return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)
    return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily = KernelFamily.EPANECHNIKOV
    bandwidth: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if not (self.bandwidth > 0 and np.isfinite(self.bandwidth)):
            raise ValueError("bandwidth must be positive")

    def __call__(self, d: np.ndarray) -> np.ndarray:
        """Scaled kernel ``K_h(d) = K(d / h) / h``."""
        h = self.bandwidth
        return kernel_profile(self.family, np.asarray(d) / h) / h


def nw_smooth(points, values, kernel: KernelSpec, out_grid: Grid):
    """Nadaraya-Watson estimate on ``out_grid``.

    Returns ``(curve, covered)``. Where no observation falls inside the kernel
    window the denominator is zero, the point is marked uncovered and the
    curve is set to 0 there.
    """
    t = np.asarray(points, dtype=float).ravel()
    y = np.asarray(values, dtype=float).ravel()
    if t.size == 0 or t.size != y.size:
        raise ValueError("need at least one (point, value) pair")
    w = kernel(out_grid.points[:, None] - t[None, :])
    den = w.sum(axis=1)
    covered = den > 0
    if not covered.any():
        raise SparsityError("no output point lies within a bandwidth of an observation")
    # Centering on the nearest observation keeps constant data exact in
    # floating point without reaching outside the kernel window.
    ref = y[np.abs(out_grid.points[:, None] - t[None, :]).argmin(axis=1)][covered]
    curve = np.zeros(out_grid.size)
    curve[covered] = ref + np.einsum("mk,mk->m", w[covered], y[None, :] - ref[:, None]) / den[covered]
    return curve, covered


def _subject_loocv(t, y, family: KernelFamily, candidates: np.ndarray):
    """Leave-one-out squared errors of one subject for every candidate.

    Observations with no neighbour even at the largest candidate cannot be
    predicted by any bandwidth; they are left out of every score and counted.
    Returns ``(scores, n_isolated)``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    d = t[:, None] - t[None, :]
    far = np.abs(d)
    np.fill_diagonal(far, np.inf)
    ref = y[far.argmin(axis=1)] if t.size > 1 else y.copy()
    w = kernel_profile(family, d / candidates.max())
    np.fill_diagonal(w, 0.0)
    usable = w.sum(axis=1) > 0
    out = np.empty(candidates.size)
    for k, h in enumerate(candidates):
        w = kernel_profile(family, d / h)
        np.fill_diagonal(w, 0.0)
        den = w.sum(axis=1)
        if np.any(den[usable] <= 0):
            out[k] = np.inf
            continue
        r = ref[usable]
        pred = r + np.einsum("mk,mk->m", w[usable], y[None, :] - r[:, None]) / den[usable]
        out[k] = np.sum((y[usable] - pred) ** 2)
    return out, int((~usable).sum())


def loocv_scores(pairs: Sequence, family: KernelFamily, candidates, threads: int = 1, return_isolated: bool = False):
    """Pooled leave-one-out squared prediction error for each candidate bandwidth.

    A candidate that leaves a predictable observation without neighbours
    scores ``inf``. Observations isolated at every candidate are excluded.
    Per-subject scores are summed in subject order, whatever ``threads`` is.
    """
    candidates = np.asarray(candidates, dtype=float).ravel()
    family = KernelFamily(family)
    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(lambda p: _subject_loocv(p[0], p[1], family, candidates), pairs))
    else:
        rows = [_subject_loocv(t, y, family, candidates) for t, y in pairs]
    scores = np.sum(np.vstack([r[0] for r in rows]), axis=0)
    if return_isolated:
        return scores, sum(r[1] for r in rows)
    return scores


def default_bandwidths(pairs: Sequence, count: int = 20) -> np.ndarray:
    """Log-spaced candidates from 1.5 x the median observation gap to half the range."""
    gaps, lo, hi = [], np.inf, -np.inf
    for t, _ in pairs:
        t = np.sort(np.asarray(t, dtype=float))
        if t.size:
            lo, hi = min(lo, t[0]), max(hi, t[-1])
        if t.size > 1:
            gaps.append(np.diff(t))
    gaps = np.concatenate(gaps) if gaps else np.array([])
    gaps = gaps[gaps > 0]
    if gaps.size == 0 or not hi > lo:
        raise ValueError("cannot derive bandwidth candidates: observations do not spread over an interval")
    a = 1.5 * np.median(gaps)
    b = 0.5 * (hi - lo)
    if a >= b:
        return np.array([b])
    return np.geomspace(a, b, count)


def _pairs(data) -> Sequence:
    if isinstance(data, FunctionalDataset):
        if data.irregular is None:
            raise ValueError("bandwidth selection needs an irregular-regime dataset")
        return data.irregular
    return data


def loocv_bandwidth(data, family: KernelFamily = KernelFamily.EPANECHNIKOV, candidates=None, threads: int = 1):
    """Common bandwidth minimizing pooled leave-one-out error across subjects.

    ``data`` is an irregular-regime :class:`FunctionalDataset` or a sequence of
    ``(T, Y)`` pairs. Ties (within a relative ``1e-9``) go to the smaller
    bandwidth.

    Observations with no neighbour within the largest candidate (for example
    a lone point between two gaps) are excluded from every score.

    Returns
    -------
    h : float
    table : ndarray, shape (k, 2)
        Candidate bandwidths and their scores, in candidate order.
    """
    pairs = _pairs(data)
    family = KernelFamily(family)
    for i, (t, _) in enumerate(pairs):
        if np.asarray(t).size < 2:
            raise ValueError(f"subject {i} has fewer than 2 observations; leave-one-out is undefined")
    if candidates is None:
        candidates = default_bandwidths(pairs)
    candidates = np.asarray(candidates, dtype=float).ravel()
    if candidates.size == 0:
        raise ValueError("empty bandwidth candidate list")
    scores, isolated = loocv_scores(pairs, family, candidates, threads, return_isolated=True)
    total = sum(np.asarray(t).size for t, _ in pairs)
    if isolated == total:
        raise SparsityError("no observation has a neighbour within the largest candidate bandwidth; try larger bandwidths")
    feasible = np.isfinite(scores)
    if not feasible.any():
        raise SparsityError("every candidate bandwidth leaves observations without neighbours; try larger bandwidths")
    best = scores[feasible].min()
    tied = feasible & (scores <= best + TIE_RTOL * max(abs(best), 1e-300))
    h = float(candidates[tied].min())
    return h, np.column_stack([candidates, scores])


def smooth_dataset(ds: FunctionalDataset, kernel: KernelSpec, grid: Optional[Grid] = None, threads: int = 1):
    """Smooth every subject of an irregular dataset onto ``grid``.

    Returns a partial-style dataset whose mask is the kernel coverage.
    """
    pairs = _pairs(ds)
    grid = grid or ds.grid

    def one(i):
        t, y = pairs[i]
        try:
            return nw_smooth(t, y, kernel, grid)
        except SparsityError:
            return np.zeros(grid.size), np.zeros(grid.size, dtype=bool)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, range(len(pairs))))
    else:
        results = [one(i) for i in range(len(pairs))]
    values = np.vstack([r[0] for r in results])
    mask = np.vstack([r[1] for r in results]).astype(np.int8)
    return FunctionalDataset.partial(grid, values, mask)


# covariance surface ----------------------------------------------------------


class CovMethod(str, enum.Enum):
    EMPIRICAL = "empirical"
    SMOOTHED = "smoothed"


@dataclass(frozen=True, eq=False)
class CovSurface:
    grid: Grid
    gamma: np.ndarray
    method: CovMethod
    filled_cells: int = 0
    bandwidth: Optional[float] = None


def _fill_nearest(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    if known.all():
        return values
    idx = ndimage.distance_transform_edt(~known, return_distances=False, return_indices=True)
    return values[tuple(idx)]


def covariance_surface(
    fit: RegressionFit,
    ds: FunctionalDataset,
    method: CovMethod = CovMethod.EMPIRICAL,
    bandwidth: Optional[float] = None,
    family: KernelFamily = KernelFamily.EPANECHNIKOV,
    leverage_correction: bool = False,
) -> CovSurface:
    """Covariance surface of the masked residual curves.

    The empirical surface is the pairwise-complete second moment
    ``sum_i d_i(s) d_i(t) r_i(s) r_i(t) / sum_i d_i(s) d_i(t)``. The smoothed
    surface applies a product-kernel Nadaraya-Watson smoother to the same raw
    products, with bandwidth chosen by leave-one-cell-out cross-validation
    when not given. Cells without any observed pair take the value of the
    nearest computed cell.

    With ``leverage_correction`` each residual is divided by ``sqrt(1 - h)``,
    ``h`` being its weighted-hat-matrix leverage at that grid point. This
    removes the shrinkage of residuals from the fitted parameters, which is
    sizeable where few subjects are observed.
    """
    method = CovMethod(method)
    mask = ds.mask.astype(float)
    R = fit.residuals * mask
    if leverage_correction:
        if fit.leverage is None:
            raise ValueError("leverage correction needs a fit that records leverages")
        room = 1.0 - fit.leverage
        R = np.divide(R, np.sqrt(np.clip(room, 0.0, None)), out=np.zeros_like(R), where=room > 1e-12)
    sums = R.T @ R
    counts = mask.T @ mask
    N = ds.grid.size
    known = counts > 0
    n_empty = int((~known).sum())
    if n_empty > MAX_EMPTY_CELL_FRACTION * N * N:
        raise SparsityError(f"{n_empty} of {N * N} covariance cells have no observed pair")

    h = None
    if method is CovMethod.EMPIRICAL:
        gamma = np.divide(sums, counts, out=np.zeros_like(sums), where=known)
    else:
        t = ds.grid.points
        d = t[:, None] - t[None, :]
        if bandwidth is None:
            gaps = np.diff(t)
            cands = np.geomspace(1.5 * np.median(gaps) if gaps.size else 0.05, 0.5, 15)
            h = _surface_loocv(sums, counts, d, family, cands)
        else:
            h = float(bandwidth)
        K = kernel_profile(family, d / h)
        num = K @ sums @ K.T
        den = K @ counts @ K.T
        known = den > 0
        gamma = np.divide(num, den, out=np.zeros_like(num), where=known)
        n_empty = int((~known).sum())
    gamma = _fill_nearest(gamma, known)
    gamma = 0.5 * (gamma + gamma.T)
    return CovSurface(ds.grid, gamma, method, filled_cells=n_empty, bandwidth=h)


def _surface_loocv(sums, counts, d, family, candidates) -> float:
    known = counts > 0
    raw = np.divide(sums, counts, out=np.zeros_like(sums), where=known)
    best_h, best = None, np.inf
    k0 = float(kernel_profile(family, np.zeros(1))[0]) ** 2
    for h in candidates:
        K = kernel_profile(family, d / h)
        num = K @ sums @ K.T - k0 * sums
        den = K @ counts @ K.T - k0 * counts
        ok = known & (den > 1e-12 * den.max())
        if not np.array_equal(ok, known):
            continue
        pred = num[ok] / den[ok]
        score = np.sum(counts[ok] * (raw[ok] - pred) ** 2)
        if score < best * (1 - TIE_RTOL):
            best_h, best = float(h), score
    if best_h is None:
        raise SparsityError("no feasible bandwidth for covariance surface smoothing")
    return best_h

"""Test statistics, the chi-square-mixture null distribution and the test driver."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .basis import BasisSet, constraint_residual
from .core import (
    DesignPair,
    FunctionalDataset,
    Regime,
    StatisticKind,
    TestReport,
)
from .regression import RegressionFit, pointwise_wls
from .rng import fresh_seed, substream
from .smoothing import (
    CovMethod,
    CovSurface,
    KernelFamily,
    KernelSpec,
    covariance_surface,
    loocv_bandwidth,
    smooth_dataset,
)

DEFAULT_DRAWS = 5000
EIG_RTOL = 1e-12
DRAW_CHUNK = 4096
# Floors separating exact zeros from floating-point roundoff.
STAT_ZERO_RTOL = 1e-20
COV_ZERO_RTOL = 1e-24


class DegenerateNullError(ValueError):
    """Every eigenvalue of the constrained covariance was truncated."""


class PipelineError(RuntimeError):
    """A failure inside :func:`run_test`, tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# statistics -----------------------------------------------------------------


def _quadratic_integral(D: np.ndarray, gram: np.ndarray, weights: np.ndarray) -> float:
    per_point = np.einsum("jm,jk,km->m", D, gram, D)
    return float(max(per_point @ weights, 0.0))


def tn_statistic(fit: RegressionFit, dp: DesignPair, basis: BasisSet) -> float:
    """Integrated ``D(t)^T (Xtilde^T Xtilde) D(t)`` with ``D = C beta_hat``."""
    D = constraint_residual(fit.beta_hat, basis)
    return _quadratic_integral(D, dp.gram, basis.grid.weights)


@dataclass(frozen=True, eq=False)
class ThetaSurface:
    """Discretized partial-sampling covariance pieces.

    ``bhat[m]`` is the observed fraction at ``t_m``, ``vhat[m, m']`` the
    fraction observed at both points, ``pi = vhat / (bhat bhat^T)`` and
    ``pi_star`` its unit-diagonal standardization. ``xi`` and ``xi_star`` are
    the covariance surface multiplied elementwise by ``pi`` and ``pi_star``.
    """

    xi: np.ndarray
    pi: np.ndarray
    bhat: np.ndarray
    vhat: np.ndarray
    pi_star: np.ndarray
    xi_star: np.ndarray
    filled_columns: tuple = ()


def _observation_moments(ds: FunctionalDataset, fill_columns: Sequence[int]):
    mask = ds.mask.astype(float)
    n = ds.n
    bhat = mask.sum(axis=0) / n
    vhat = mask.T @ mask / n
    empty = np.flatnonzero(bhat == 0)
    if empty.size:
        allowed = set(int(m) for m in fill_columns)
        if not set(empty.tolist()) <= allowed or empty.size == bhat.size:
            raise ValueError(f"no observations at grid columns {empty.tolist()}; b(t) must be positive")
        seen = np.flatnonzero(bhat > 0)
        nearest = seen[np.abs(seen[None, :] - empty[:, None]).argmin(axis=1)]
        src = np.arange(bhat.size)
        src[empty] = nearest
        bhat = bhat[src]
        vhat = vhat[np.ix_(src, src)]
    return bhat, vhat, empty


def _assemble_theta(gamma, pi, bhat, vhat, empty) -> ThetaSurface:
    d = np.sqrt(np.diag(pi))
    pi_star = pi / np.outer(d, d)
    return ThetaSurface(
        xi=gamma * pi,
        pi=pi,
        bhat=bhat,
        vhat=vhat,
        pi_star=pi_star,
        xi_star=gamma * pi_star,
        filled_columns=tuple(int(m) for m in empty),
    )


def theta_surface(ds: FunctionalDataset, cov: CovSurface, fill_columns: Sequence[int] = ()) -> ThetaSurface:
    """Observation-pattern moments and the surfaces ``Xi`` and ``Xi*``.

    Grid points where nobody is observed make ``b`` zero and raise, unless
    they are listed in ``fill_columns`` (the columns the regression
    interpolated); those borrow the moments of the nearest observed column.
    """
    if not ds.grid.same_as(cov.grid):
        raise ValueError("grid mismatch between dataset and covariance surface")
    bhat, vhat, empty = _observation_moments(ds, fill_columns)
    pi = vhat / np.outer(bhat, bhat)
    return _assemble_theta(cov.gamma, pi, bhat, vhat, empty)


def design_theta_surface(ds: FunctionalDataset, cov: CovSurface, fit: RegressionFit, dp: DesignPair) -> ThetaSurface:
    """Theta surface with ``Pi`` computed from the fitted design itself.

    ``Pi[s, t] = tr(G H_s H_t^T) / p`` where ``H_m`` maps the observed values at
    ``t_m`` to ``beta_hat(t_m)`` and ``G = Xtilde^T Xtilde``. Conditionally on
    the covariates and the mask, ``Cov(beta_hat(s), beta_hat(t))`` equals
    ``gamma(s, t) H_s H_t^T``, so this is the exact finite-sample counterpart
    of ``v(s, t) / (b(s) b(t))``, to which it converges. It is identically 1
    when the mask is complete. ``bhat`` and ``vhat`` are still the observed
    fractions, for reporting.
    """
    if not ds.grid.same_as(cov.grid):
        raise ValueError("grid mismatch between dataset and covariance surface")
    if fit.coef_maps is None:
        raise ValueError("the design-based Pi needs a fit that records its coefficient maps")
    bhat, vhat, empty = _observation_moments(ds, fit.interpolated_columns)
    if ds.mask.all():
        pi = np.ones((ds.grid.size, ds.grid.size))
    else:
        H = fit.coef_maps
        pi = np.einsum("jk,sji,tki->st", dp.gram, H, H, optimize=True) / dp.p
        pi = 0.5 * (pi + pi.T)
        if np.any(np.diag(pi) <= 0):
            raise ValueError("design-based Pi has a non-positive diagonal entry")
    return _assemble_theta(cov.gamma, pi, bhat, vhat, empty)


def tn_statistic_standardized(
    fit: RegressionFit, dp: DesignPair, basis: BasisSet, theta: ThetaSurface
) -> float:
    """Statistic on ``D(t_m) / sqrt(Pi(t_m, t_m))``, which removes the
    pointwise variance inflation from partial sampling.

    With the moment-based ``Pi`` the scale is ``b(t_m) / sqrt(v(t_m, t_m))``.
    """
    vdiag = np.diag(theta.vhat)
    interp = set(fit.interpolated_columns) | set(theta.filled_columns)
    zero = [m for m in np.flatnonzero(vdiag <= 0) if m not in interp]
    if zero:
        raise ValueError(f"v(t, t) is zero at grid columns {zero}")
    pdiag = np.diag(theta.pi)
    scale = np.divide(1.0, np.sqrt(pdiag), out=np.zeros_like(pdiag), where=pdiag > 0)
    D = constraint_residual(fit.beta_hat, basis) * scale
    return _quadratic_integral(D, dp.gram, basis.grid.weights)


# null distribution ------------------------------------------------------------


def _regress_out(S: np.ndarray, basis: BasisSet) -> np.ndarray:
    """Fitted values of the weighted regression of every column of ``S`` on the basis."""
    V = basis.functions.T
    sw = np.sqrt(basis.grid.weights)[:, None]
    coef, *_ = np.linalg.lstsq(sw * V, sw * S, rcond=None)
    return V @ coef


def tilde_transform(S, basis: BasisSet) -> np.ndarray:
    """Remove the null-span component from both arguments of a surface.

    Computes ``S - S_c - S_r + S_cr`` where ``S_c`` regresses each column on
    the basis, ``S_r`` each row, and ``S_cr`` does both in turn. This equals
    ``(I - P) S (I - P)^T`` for the quadrature projector ``P``.
    """
    S = np.asarray(S, dtype=float)
    N = basis.grid.size
    if S.shape != (N, N):
        raise ValueError(f"grid mismatch: surface is {S.shape}, basis grid has {N} points")
    if basis.r == 0:
        return S.copy()
    S_c = _regress_out(S, basis)
    S_r = _regress_out(S.T, basis).T
    S_cr = _regress_out(S_c.T, basis).T
    out = S - S_c - S_r + S_cr
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class NullModel:
    """Monte Carlo sample of ``T0 = sum_k lambda_k A_k`` with ``A_k ~ chi2_p``."""

    eigenvalues: np.ndarray
    p: int
    draws: np.ndarray
    seed: int
    truncated: int = 0

    @property
    def K(self) -> int:
        return self.eigenvalues.size

    def critical_value(self, alpha: float) -> float:
        return float(np.quantile(self.draws, 1.0 - alpha))


def operator_eigenvalues(S: np.ndarray, weights: np.ndarray):
    """Eigenvalues of the integral operator with kernel ``S`` under the grid quadrature.

    For uniform weights these are the matrix eigenvalues divided by ``N``.
    Returns ``(kept, truncated_count)``; kept values are positive and
    descending, anything below ``1e-12`` of the largest is dropped.
    """
    sw = np.sqrt(np.asarray(weights, dtype=float))
    lam = np.linalg.eigvalsh(sw[:, None] * np.asarray(S, dtype=float) * sw[None, :])[::-1]
    if lam.size == 0 or lam[0] <= 0:
        return np.array([]), lam.size
    keep = lam > EIG_RTOL * lam[0]
    return lam[keep], int((~keep).sum())


def mixture_draws(eigenvalues, p: int, B: int, seed: int, threads: int = 1) -> np.ndarray:
    """``B`` draws of ``sum_k eigenvalues[k] * chi2_p``.

    Draws come in fixed chunks, chunk ``c`` from the Philox stream
    ``(seed, c)``, so the output does not depend on ``threads``.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    bounds = list(range(0, B, DRAW_CHUNK)) + [B]

    def chunk(c):
        size = bounds[c + 1] - bounds[c]
        gen = substream(seed, c)
        return gen.chisquare(p, size=(size, lam.size)) @ lam

    nchunks = len(bounds) - 1
    if threads > 1 and nchunks > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(chunk, range(nchunks)))
    else:
        parts = [chunk(c) for c in range(nchunks)]
    return np.concatenate(parts) if parts else np.zeros(0)


def null_model(Stilde, p: int, B: int = DEFAULT_DRAWS, seed: int = 0, weights=None, threads: int = 1) -> NullModel:
    """Chi-square-mixture null law from the constrained covariance ``Stilde``."""
    Stilde = np.asarray(Stilde, dtype=float)
    N = Stilde.shape[0]
    if p < 1:
        raise ValueError("p must be positive")
    if B < 1:
        raise ValueError("B must be positive")
    if weights is None:
        weights = np.full(N, 1.0 / N)
    lam, truncated = operator_eigenvalues(Stilde, weights)
    if lam.size == 0:
        raise DegenerateNullError("all eigenvalues of the constrained covariance are zero or negative")
    draws = mixture_draws(lam, p, B, seed, threads)
    return NullModel(lam, int(p), draws, int(seed), truncated)


def p_value(stat: float, nm: NullModel) -> float:
    """Add-one Monte Carlo p-value ``(1 + #{draws >= stat}) / (B + 1)``."""
    B = nm.draws.size
    return float((1 + np.count_nonzero(nm.draws >= stat)) / (B + 1))


# driver ------------------------------------------------------------------------


@dataclass
class TestOptions:
    alpha: float = 0.05
    B: int = DEFAULT_DRAWS
    seed: Optional[int] = None
    standardize: bool = True
    regime: Optional[Regime] = None
    kernel: KernelFamily = KernelFamily.EPANECHNIKOV
    bandwidth: Optional[float] = None
    bandwidth_candidates: Optional[np.ndarray] = None
    cov_method: CovMethod = CovMethod.EMPIRICAL
    cov_bandwidth: Optional[float] = None
    orthogonalization: str = "local"
    leverage_correction: bool = True
    pi_method: str = "design"
    threads: int = 1
    extra: dict = field(default_factory=dict)

    __test__ = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.B < 1:
            raise ValueError("B must be positive")
        if self.orthogonalization not in ("local", "global"):
            raise ValueError("orthogonalization must be 'local' or 'global'")
        if self.pi_method not in ("design", "moments"):
            raise ValueError("pi_method must be 'design' or 'moments'")


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def _grid_path(ds, dp, basis, opts, partial: bool, diag: dict):
    """Shared body of the grid-based (full / partial) pipelines."""
    with _Stage("fit"):
        fit = pointwise_wls(ds, dp, method=opts.orthogonalization)
    with _Stage("covariance"):
        cov = covariance_surface(
            fit, ds, opts.cov_method, opts.cov_bandwidth, opts.kernel, leverage_correction=opts.leverage_correction
        )
    reference = _quadratic_integral(fit.beta_hat, dp.gram, ds.grid.weights)
    with _Stage("statistic"):
        if partial:
            if opts.pi_method == "design":
                theta = design_theta_surface(ds, cov, fit, dp)
            else:
                theta = theta_surface(ds, cov, fill_columns=fit.interpolated_columns)
            if opts.standardize:
                stat = tn_statistic_standardized(fit, dp, basis, theta)
                surface = theta.xi_star
            else:
                stat = tn_statistic(fit, dp, basis)
                surface = theta.xi
        else:
            stat = tn_statistic(fit, dp, basis)
            surface = cov.gamma
        if stat <= STAT_ZERO_RTOL * reference:
            stat = 0.0
    with _Stage("constrain"):
        stilde = tilde_transform(surface, basis)
    obs = ds.mask == 1
    scale = float(np.mean(ds.values[obs] ** 2)) if obs.any() else 0.0
    diag.update(
        interpolated_columns=list(fit.interpolated_columns),
        effective_n_min=int(fit.effective_n.min()),
        effective_n_median=float(np.median(fit.effective_n)),
        covariance_method=cov.method.value,
        covariance_filled_cells=cov.filled_cells,
    )
    if cov.bandwidth is not None:
        diag["covariance_bandwidth"] = cov.bandwidth
    numerically_zero = np.max(np.abs(cov.gamma)) <= COV_ZERO_RTOL * scale
    return stat, stilde, numerically_zero


def run_test(ds: FunctionalDataset, dp: DesignPair, basis: BasisSet, opts: Optional[TestOptions] = None, **kwargs) -> TestReport:
    """Test ``H0: every coefficient function lies in span(basis)``.

    Dispatch on the sampling regime (``opts.regime`` overrides the dataset's):

    * full: ``Tn`` with the null built from the residual covariance;
    * partial: standardized ``Tn`` with the null built from ``Gamma o Pi*``
      (``standardize=False`` gives the unstandardized pair);
    * irregular: bandwidth by leave-one-out CV, per-subject smoothing onto
      the grid, then the full path (``Tn*``);
    * composition: the same smoothing with coverage masks, then the partial
      path (``Tn**``).
    """
    if opts is None:
        opts = TestOptions(**kwargs)
    elif kwargs:
        raise TypeError("pass either opts or keyword options, not both")
    seed = fresh_seed() if opts.seed is None else int(opts.seed)
    regime = Regime.parse(opts.regime) if opts.regime is not None else ds.regime
    if not ds.grid.same_as(basis.grid):
        raise PipelineError("setup", ValueError("grid mismatch between dataset and basis"))
    diag = {"regime": regime.value}

    if regime.irregular_sampling:
        with _Stage("bandwidth"):
            if opts.bandwidth is not None:
                h = float(opts.bandwidth)
            else:
                h, _ = loocv_bandwidth(ds, opts.kernel, opts.bandwidth_candidates, threads=opts.threads)
        with _Stage("smoothing"):
            smoothed = smooth_dataset(ds, KernelSpec(opts.kernel, h), ds.grid, threads=opts.threads)
        diag["bandwidth"] = h
        diag["coverage_fraction"] = float(smoothed.mask.mean())
        if regime is Regime.IRREGULAR_NOISY:
            kind = StatisticKind.TN_SMOOTHED
            if smoothed.mask.all():
                work, partial = FunctionalDataset.full(ds.grid, smoothed.values), False
            else:
                # Some grid points were outside every kernel window.
                work, partial = smoothed, True
                diag["coverage_fallback"] = True
        else:
            kind = StatisticKind.TN_SMOOTHED_PARTIAL
            work, partial = smoothed, True
    elif regime is Regime.PARTIAL:
        kind = StatisticKind.TN_STANDARDIZED if opts.standardize else StatisticKind.TN
        work, partial = ds, True
    else:
        kind = StatisticKind.TN
        work, partial = ds, False

    stat, stilde, zero_cov = _grid_path(work, dp, basis, opts, partial, diag)

    with _Stage("null"):
        try:
            if zero_cov:
                raise DegenerateNullError("residual covariance is numerically zero")
            nm = null_model(stilde, dp.p, opts.B, seed, ds.grid.weights, threads=opts.threads)
        except DegenerateNullError as exc:
            # Point mass at zero: the data carry no noise to test against.
            nm = NullModel(np.array([]), dp.p, np.zeros(opts.B), seed, truncated=ds.grid.size)
            diag["degenerate_null"] = str(exc)
    pv = p_value(stat, nm)
    crit = nm.critical_value(opts.alpha)
    diag["eigenvalues_truncated"] = nm.truncated
    diag["K_hat"] = nm.K
    return TestReport(
        statistic=stat,
        statistic_kind=kind,
        eigenvalues=nm.eigenvalues,
        null_draws=int(nm.draws.size),
        p_value=pv,
        critical_value=crit,
        alpha=opts.alpha,
        seed=seed,
        reject=bool(stat > crit),
        diagnostics=diag,
    )

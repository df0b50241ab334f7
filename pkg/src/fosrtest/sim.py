"""Synthetic data from the two simulation scenarios and the size/power harness.

Covariates ``U ~ N4(0, Sigma)`` with ``Sigma_ij = 0.5^|i-j|`` give
``X = (1{U1 > 0}, Phi(U2), U3)`` and ``Z = (1, U4)``. The error process is a
100-term sine expansion with variances ``4 m^-4``. The null coefficients are
``(v_1 + v_{j+1}) / sqrt(2)`` in the orthonormal polynomial basis ``V(5)``;
scenario A perturbs them by a normalized sine series, scenario B by ``v_5``,
both scaled by ``d * n^(-tau/2)``.
"""

from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats

from .basis import BasisSet, orthonormal_polynomials
from .core import DesignPair, FunctionalDataset, Grid, Regime
from .inference import TestOptions, run_test
from .regression import orthogonalize
from .rng import derive_seed, resolve_threads, substream

log = logging.getLogger(__name__)

N_SINE_TERMS = 100
MAX_FAILURE_FRACTION = 0.01

# Stream ids; each random ingredient has its own stream so that regimes share
# covariates and error curves under the same seed.
_COVARIATES, _ERRORS, _MISSING, _SAMPLING, _NOISE = range(5)


class Scenario(str, enum.Enum):
    A = "A"
    B = "B"


@dataclass(frozen=True)
class SimulationScenario:
    n: int = 100
    N_grid: int = 100
    scenario: Scenario = Scenario.A
    d: float = 0.0
    tau: float = 1.0
    regime: Regime = Regime.FULL
    p_miss: int = 3
    k_miss: int = 3
    N_obs: Optional[int] = None
    noise_sd: float = 0.5
    seed: int = 0
    empty_missing_intervals: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(str(self.scenario).upper()[-1]))
        object.__setattr__(self, "regime", Regime.parse(self.regime))
        if self.N_obs is None:
            default = 60 if self.regime is Regime.PARTIAL_IRREGULAR_NOISY else 80
            object.__setattr__(self, "N_obs", min(default, self.N_grid))
        if self.n < 5:
            raise ValueError("n must be at least 5")
        if self.N_grid < 5:
            raise ValueError("N_grid must be at least 5")
        if self.d < 0:
            raise ValueError("d must be nonnegative")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if not 2 <= self.N_obs <= self.N_grid:
            raise ValueError("N_obs must lie in [2, N_grid]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        _check_missingness(self.p_miss, self.k_miss)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        d["regime"] = self.regime.value
        return d


def _check_missingness(p: int, k: int) -> None:
    if p < 3:
        raise ValueError(f"p_miss must be at least 3 (got {p})")
    if k < p:
        raise ValueError(f"k_miss must be at least p_miss (got k={k}, p={p})")


@dataclass(frozen=True, eq=False)
class Truth:
    beta: np.ndarray
    alpha: np.ndarray
    null_holds: bool
    missing_intervals: Optional[np.ndarray]
    mask: np.ndarray
    complete: np.ndarray


def sine_basis(t: np.ndarray, terms: int = N_SINE_TERMS) -> np.ndarray:
    m = np.arange(1, terms + 1)
    return np.sqrt(2.0) * np.sin(2.0 * np.pi * np.outer(m, t))


def scenario_a_deviation(t: np.ndarray, p: int = 3) -> np.ndarray:
    """Rows ``sum_m (j+m)^-1/2 phi_m / (sum_m (j+m)^-1)^1/2`` for ``j = 1..p``."""
    m = np.arange(1, N_SINE_TERMS + 1)
    phi = sine_basis(t)
    rows = []
    for j in range(1, p + 1):
        w = (j + m) ** -0.5
        rows.append(w @ phi / np.sqrt(np.sum(1.0 / (j + m))))
    return np.vstack(rows)


def coefficient_functions(sc: SimulationScenario, grid: Grid):
    """Return ``(beta, beta0, alpha, V5)`` on ``grid``."""
    V = orthonormal_polynomials(5, grid).functions
    beta0 = np.vstack([(V[0] + V[j]) / np.sqrt(2.0) for j in (1, 2, 3)])
    alpha = []
    for k in (1, 2):
        ls = np.array([4, 5])
        coef = (k + ls) ** -0.5 * (-1.0) ** ls / np.sqrt(np.sum(1.0 / (k + ls)))
        alpha.append(coef @ V[3:5])
    alpha = np.vstack(alpha)
    if sc.scenario is Scenario.A:
        delta = scenario_a_deviation(grid.points)
    else:
        delta = np.vstack([V[4]] * 3)
    beta = beta0 + sc.n ** (-sc.tau / 2.0) * sc.d * delta
    return beta, beta0, alpha, V


def draw_missing_intervals(gen: np.random.Generator, size: int, p: int, k: int) -> np.ndarray:
    """``[U_(p+1), U_(p+k+2)]`` from ``2p + k + 2`` sorted uniforms, per row."""
    u = np.sort(gen.random((size, 2 * p + k + 2)), axis=1)
    return np.column_stack([u[:, p], u[:, p + k + 1]])


def generate_dataset(sc: SimulationScenario):
    """Draw one dataset; returns ``(FunctionalDataset, DesignPair, Truth)``."""
    grid = Grid.uniform(sc.N_grid)
    t = grid.points
    n = sc.n

    cov = 0.5 ** np.abs(np.subtract.outer(np.arange(4), np.arange(4)))
    U = substream(sc.seed, _COVARIATES).multivariate_normal(np.zeros(4), cov, size=n, method="cholesky")
    X = np.column_stack([(U[:, 0] > 0).astype(float), stats.norm.cdf(U[:, 1]), U[:, 2]])
    Z = np.column_stack([np.ones(n), U[:, 3]])
    dp = orthogonalize(X, Z, ("x1", "x2", "x3"), ("intercept", "z1"))

    beta, _, alpha, _ = coefficient_functions(sc, grid)
    m = np.arange(1, N_SINE_TERMS + 1)
    e = substream(sc.seed, _ERRORS).standard_normal((n, N_SINE_TERMS)) * (2.0 / m**2)
    eps = e @ sine_basis(t)
    Y = X @ beta + Z @ alpha + eps

    # Drawn for every regime so that the other streams never shift.
    intervals = draw_missing_intervals(substream(sc.seed, _MISSING), n, sc.p_miss, sc.k_miss)
    if sc.regime in (Regime.PARTIAL, Regime.PARTIAL_IRREGULAR_NOISY) and not sc.empty_missing_intervals:
        inside = (t[None, :] >= intervals[:, :1]) & (t[None, :] <= intervals[:, 1:])
        mask = (~inside).astype(np.int8)
        kept_intervals = intervals
    else:
        mask = np.ones((n, grid.size), dtype=np.int8)
        kept_intervals = None

    truth = Truth(beta, alpha, sc.d == 0, kept_intervals, mask, Y)

    if sc.regime in (Regime.FULL, Regime.PARTIAL):
        if sc.regime is Regime.FULL:
            ds = FunctionalDataset.full(grid, Y)
        else:
            ds = FunctionalDataset.partial(grid, Y, mask)
        return ds, dp, truth

    samp = substream(sc.seed, _SAMPLING)
    noise = substream(sc.seed, _NOISE)
    pairs = []
    for i in range(n):
        avail = np.flatnonzero(mask[i])
        take = min(sc.N_obs, avail.size)
        idx = np.sort(samp.choice(avail, size=take, replace=False))
        y = Y[i, idx] + noise.normal(0.0, sc.noise_sd, size=take)
        pairs.append((t[idx], y))
    ds = FunctionalDataset.from_irregular(grid, pairs, sc.regime)
    return ds, dp, truth


# experiments -----------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: SimulationScenario
    replicates: int
    rejections: int
    rejection_rate: float
    mean_runtime: float
    failures: int = 0
    alpha: float = 0.05
    B: int = 1000
    p_values: list = field(default_factory=list, repr=False)

    @property
    def standard_error(self) -> float:
        r = self.rejection_rate
        return float(np.sqrt(r * (1 - r) / max(self.replicates, 1)))

    def row(self) -> dict:
        c = self.config
        return {
            "scenario": c.scenario.value,
            "d": c.d,
            "n": c.n,
            "tau": c.tau,
            "regime": c.regime.value,
            "statistic": _STAT_LABEL[c.regime],
            "alpha": self.alpha,
            "B": self.B,
            "replicates": self.replicates,
            "rejections": self.rejections,
            "rejection_rate": self.rejection_rate,
            "failures": self.failures,
            "mean_runtime": self.mean_runtime,
            "seed": c.seed,
        }


_STAT_LABEL = {
    Regime.FULL: "Tn_full",
    Regime.PARTIAL: "Tn",
    Regime.IRREGULAR_NOISY: "Tn*",
    Regime.PARTIAL_IRREGULAR_NOISY: "Tn**",
}


def _replicate(args):
    sc, rep, alpha, B, hypothesis_r = args
    rep_seed = derive_seed(sc.seed, rep)
    start = time.perf_counter()
    try:
        ds, dp, _ = generate_dataset(replace(sc, seed=rep_seed))
        basis = orthonormal_polynomials(hypothesis_r, ds.grid)
        report = run_test(ds, dp, basis, TestOptions(alpha=alpha, B=B, seed=derive_seed(rep_seed, 1)))
        return rep, report.reject, report.p_value, time.perf_counter() - start, None
    except Exception as exc:  # tallied as a failure; the run errors out if too many
        return rep, None, None, time.perf_counter() - start, f"{type(exc).__name__}: {exc}"


def run_experiment(
    sc: SimulationScenario,
    replicates: int,
    alpha: float = 0.05,
    B: int = 1000,
    threads: Optional[int] = None,
    hypothesis_r: int = 4,
) -> ExperimentResult:
    """Rejection rate of ``H0: beta_j in span V(hypothesis_r)`` over replicates.

    Replicate ``k`` uses the seed ``derive_seed(sc.seed, k)``, so results do
    not depend on the number of worker processes.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    workers = min(resolve_threads(threads), replicates)
    tasks = [(sc, rep, alpha, B, hypothesis_r) for rep in range(replicates)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=max(1, replicates // (4 * workers))))
    else:
        results = [_replicate(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    failures = [r for r in results if r[4] is not None]
    if failures:
        log.warning("%d replicate(s) failed, first: %s", len(failures), failures[0][4])
        if len(failures) >= MAX_FAILURE_FRACTION * replicates:
            raise RuntimeError(
                f"{len(failures)} of {replicates} replicates failed (limit 1%); first error: {failures[0][4]}"
            )
    ok = [r for r in results if r[4] is None]
    rejections = sum(1 for r in ok if r[1])
    return ExperimentResult(
        config=sc,
        replicates=len(ok),
        rejections=rejections,
        rejection_rate=rejections / len(ok),
        mean_runtime=float(np.mean([r[3] for r in results])),
        failures=len(failures),
        alpha=alpha,
        B=B,
        p_values=[r[2] for r in ok],
    )


# missingness model check --------------------------------------------------------


@dataclass
class MissingnessReport:
    p: int
    k: int
    draws: int
    mean_length: float
    var_length: float
    beta_mean: float
    beta_var: float
    lags: np.ndarray
    disagreement: np.ndarray
    monotone: bool


def verify_missingness_model(p_miss: int = 3, k_miss: int = 3, draws: int = 100_000, seed: int = 0,
                             lags=(0.01, 0.02, 0.05, 0.1, 0.2)) -> MissingnessReport:
    """Compare the simulated missing-interval lengths with ``Beta(k+1, 2p+2)``.

    Also estimates ``P(delta(s) != delta(t))`` at ``|s - t|`` in ``lags`` (with
    ``s`` uniform on ``[0, 1 - lag]``), which should grow with the lag.
    """
    _check_missingness(p_miss, k_miss)
    gen = substream(seed, 0)
    iv = draw_missing_intervals(gen, draws, p_miss, k_miss)
    length = iv[:, 1] - iv[:, 0]
    a, b = k_miss + 1, 2 * p_miss + 2
    lags = np.asarray(lags, dtype=float)
    dis = []
    for lag in lags:
        s = gen.random(draws) * (1 - lag)
        tt = s + lag
        ds_ = (s >= iv[:, 0]) & (s <= iv[:, 1])
        dt_ = (tt >= iv[:, 0]) & (tt <= iv[:, 1])
        dis.append(np.mean(ds_ != dt_))
    dis = np.array(dis)
    return MissingnessReport(
        p=p_miss,
        k=k_miss,
        draws=draws,
        mean_length=float(length.mean()),
        var_length=float(length.var()),
        beta_mean=a / (a + b),
        beta_var=a * b / ((a + b) ** 2 * (a + b + 1)),
        lags=lags,
        disagreement=dis,
        monotone=bool(np.all(np.diff(dis) >= 0)),
    )

"""Domain types shared across the package: grids, functional datasets, designs
and test reports."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np


class RankError(ValueError):
    """A design or basis does not have the rank the computation needs."""


class SparsityError(ValueError):
    """Too few observations to identify the pointwise quantities."""


class Regime(str, enum.Enum):
    FULL = "full"
    PARTIAL = "partial"
    IRREGULAR_NOISY = "irregular"
    PARTIAL_IRREGULAR_NOISY = "composition"

    @classmethod
    def parse(cls, value: "str | Regime") -> "Regime":
        if isinstance(value, Regime):
            return value
        aliases = {
            "full": cls.FULL,
            "partial": cls.PARTIAL,
            "irregular": cls.IRREGULAR_NOISY,
            "irregularnoisy": cls.IRREGULAR_NOISY,
            "composition": cls.PARTIAL_IRREGULAR_NOISY,
            "partialirregularnoisy": cls.PARTIAL_IRREGULAR_NOISY,
        }
        key = str(value).lower().replace("_", "").replace("-", "")
        if key not in aliases:
            raise ValueError(f"unknown regime {value!r}; expected one of {sorted(set(aliases))}")
        return aliases[key]

    @property
    def irregular_sampling(self) -> bool:
        return self in (Regime.IRREGULAR_NOISY, Regime.PARTIAL_IRREGULAR_NOISY)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """Ordered evaluation points in [0, 1] with quadrature weights.

    ``weights`` default to ``1/N`` at every point, so that integrals are the
    plain average ``N^-1 sum_m f(t_m)``.
    """

    points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).ravel()
        if pts.size == 0:
            raise ValueError("grid needs at least one point")
        if not np.all(np.isfinite(pts)) or pts[0] < 0.0 or pts[-1] > 1.0:
            raise ValueError("grid points must lie in [0, 1]")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        if self.weights is None:
            w = np.full(pts.size, 1.0 / pts.size)
        else:
            w = np.asarray(self.weights, dtype=float).ravel()
            if w.shape != pts.shape:
                raise ValueError("weights must match points")
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be strictly positive")
            w = w / w.sum()
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, n_points: int) -> "Grid":
        """Regular grid of ``n_points`` on [0, 1] including both endpoints."""
        if n_points < 1:
            raise ValueError("n_points must be positive")
        if n_points == 1:
            return cls(np.array([0.5]))
        return cls(np.linspace(0.0, 1.0, n_points))

    @classmethod
    def trapezoid(cls, points) -> "Grid":
        """Grid whose weights are the (normalized) trapezoid rule; for non-uniform points."""
        pts = np.asarray(points, dtype=float)
        if pts.size < 2:
            return cls(pts)
        gaps = np.diff(pts)
        w = np.zeros_like(pts)
        w[:-1] += gaps / 2
        w[1:] += gaps / 2
        return cls(pts, w)

    @property
    def size(self) -> int:
        return self.points.size

    def __len__(self) -> int:
        return self.size

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Quadrature over the last axis."""
        return np.asarray(values) @ self.weights

    def inner(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        return self.integrate(np.asarray(f) * np.asarray(g))

    def same_as(self, other: "Grid") -> bool:
        return (
            self.size == other.size
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.weights, other.weights)
        )

    def __eq__(self, other):
        return isinstance(other, Grid) and self.same_as(other)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FunctionalDataset:
    """``n`` response curves on a common grid.

    ``values[i, m]`` holds ``Y_i(t_m)`` where ``mask[i, m] == 1`` and zero
    elsewhere. For the irregular regimes ``irregular`` carries the raw
    ``(T_i, Y*_i)`` arrays of every subject; ``values``/``mask`` then record
    only those raw observations that fall exactly on grid points and are not
    used by the test.
    """

    grid: Grid
    values: np.ndarray
    mask: np.ndarray
    regime: Regime = Regime.FULL
    irregular: Optional[tuple] = None
    subject_ids: Optional[tuple] = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask)
        if vals.ndim != 2 or vals.shape[1] != self.grid.size:
            raise ValueError(f"values must be n x {self.grid.size}, got {vals.shape}")
        if mask.shape != vals.shape:
            raise ValueError("mask must have the same shape as values")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "regime", Regime.parse(self.regime))
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "mask", _frozen(mask.astype(np.int8)))
        if self.irregular is not None:
            pairs = []
            for t, y in self.irregular:
                t = np.asarray(t, dtype=float).ravel()
                y = np.asarray(y, dtype=float).ravel()
                if t.shape != y.shape:
                    raise ValueError("irregular points and values differ in length")
                pairs.append((_frozen(t), _frozen(y)))
            if len(pairs) != vals.shape[0]:
                raise ValueError("irregular must hold one (T, Y) pair per subject")
            object.__setattr__(self, "irregular", tuple(pairs))
        if self.subject_ids is not None:
            ids = tuple(str(s) for s in self.subject_ids)
            if len(ids) != vals.shape[0]:
                raise ValueError("subject_ids length must equal n")
            object.__setattr__(self, "subject_ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @classmethod
    def full(cls, grid: Grid, values) -> "FunctionalDataset":
        values = np.asarray(values, dtype=float)
        return cls(grid, values, np.ones(values.shape, dtype=np.int8), Regime.FULL)

    @classmethod
    def partial(cls, grid: Grid, values, mask) -> "FunctionalDataset":
        mask = np.asarray(mask).astype(np.int8)
        values = np.where(mask == 1, np.asarray(values, dtype=float), 0.0)
        return cls(grid, values, mask, Regime.PARTIAL)

    @classmethod
    def from_irregular(cls, grid: Grid, pairs: Sequence, regime=Regime.IRREGULAR_NOISY, subject_ids=None):
        """Build an irregular-regime dataset from per-subject ``(T, Y)`` arrays."""
        regime = Regime.parse(regime)
        if not regime.irregular_sampling:
            raise ValueError("from_irregular needs an irregular regime")
        n = len(pairs)
        values = np.zeros((n, grid.size))
        mask = np.zeros((n, grid.size), dtype=np.int8)
        for i, (t, y) in enumerate(pairs):
            t = np.asarray(t, dtype=float)
            y = np.asarray(y, dtype=float)
            idx = np.searchsorted(grid.points, t)
            idx = np.clip(idx, 0, grid.size - 1)
            on_grid = grid.points[idx] == t
            values[i, idx[on_grid]] = y[on_grid]
            mask[i, idx[on_grid]] = 1
        return cls(grid, values, mask, regime, tuple(pairs), subject_ids)

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "grid": {"points": self.grid.points.tolist(), "weights": self.grid.weights.tolist()},
            "values": self.values.tolist(),
            "mask": self.mask.tolist(),
            "regime": self.regime.value,
            "irregular": None,
            "subject_ids": list(self.subject_ids) if self.subject_ids is not None else None,
        }
        if self.irregular is not None:
            d["irregular"] = [[t.tolist(), y.tolist()] for t, y in self.irregular]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionalDataset":
        grid = Grid(np.array(d["grid"]["points"]), np.array(d["grid"]["weights"]))
        # Grid renormalizes weights; restore the stored ones bit-exactly.
        object.__setattr__(grid, "weights", _frozen(np.array(d["grid"]["weights"], dtype=float)))
        irregular = d.get("irregular")
        if irregular is not None:
            irregular = tuple((np.array(t, dtype=float), np.array(y, dtype=float)) for t, y in irregular)
        return cls(
            grid,
            np.array(d["values"], dtype=float).reshape(len(d["values"]), grid.size),
            np.array(d["mask"], dtype=np.int8).reshape(len(d["mask"]), grid.size),
            Regime.parse(d["regime"]),
            irregular,
            d.get("subject_ids"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FunctionalDataset":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class DesignPair:
    """Tested covariates ``X``, nuisance covariates ``Z`` and ``Xtilde = (I - P_Z) X``."""

    X: np.ndarray
    Z: np.ndarray
    Xtilde: np.ndarray
    x_names: Optional[tuple] = None
    z_names: Optional[tuple] = None

    def __post_init__(self):
        for name in ("X", "Z", "Xtilde"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim == 1:
                a = a[:, None]
            object.__setattr__(self, name, _frozen(a))
        n = self.X.shape[0]
        if self.Z.shape[0] != n or self.Xtilde.shape != self.X.shape:
            raise ValueError("X, Z and Xtilde must have matching rows")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def gram(self) -> np.ndarray:
        """``Xtilde^T Xtilde``, the weight matrix of the test statistic."""
        return self.Xtilde.T @ self.Xtilde


class StatisticKind(str, enum.Enum):
    TN = "Tn"
    TN_STANDARDIZED = "Tn_standardized"
    TN_SMOOTHED = "Tn_star"
    TN_SMOOTHED_PARTIAL = "Tn_star_star"


@dataclass
class TestReport:
    statistic: float
    statistic_kind: StatisticKind
    eigenvalues: np.ndarray
    null_draws: int
    p_value: float
    critical_value: float
    alpha: float
    seed: int
    reject: bool
    diagnostics: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class

    def to_dict(self) -> dict:
        return {
            "statistic": float(self.statistic),
            "statistic_kind": StatisticKind(self.statistic_kind).value,
            "eigenvalues": [float(x) for x in np.asarray(self.eigenvalues)],
            "null_draws": int(self.null_draws),
            "p_value": float(self.p_value),
            "critical_value": float(self.critical_value),
            "alpha": float(self.alpha),
            "seed": int(self.seed),
            "reject": bool(self.reject),
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "TestReport":
        return cls(
            statistic=d["statistic"],
            statistic_kind=StatisticKind(d["statistic_kind"]),
            eigenvalues=np.array(d["eigenvalues"], dtype=float),
            null_draws=d["null_draws"],
            p_value=d["p_value"],
            critical_value=d["critical_value"],
            alpha=d["alpha"],
            seed=d["seed"],
            reject=d["reject"],
            diagnostics=d.get("diagnostics", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "TestReport":
        return cls.from_dict(json.loads(text))


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


# validation -----------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    kind: str
    subject: Optional[int] = None
    column: Optional[int] = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.kind == "ok"


OK = Finding("ok")


def validate_dataset(ds: FunctionalDataset, design: Optional[DesignPair] = None) -> list:
    """Check a dataset for conditions that make pointwise estimation impossible.

    Returns a list of :class:`Finding`; ``[OK]`` when nothing is wrong. Kinds:
    ``column_unidentifiable`` (no subject observed at a grid point),
    ``rank_deficient_at`` (observed subjects do not identify the tested
    coefficients, only checked when ``design`` is given),
    ``value_nonzero_under_zero_mask``, ``nonfinite_value``,
    ``full_regime_incomplete_mask``, ``irregular_missing``,
    ``subject_without_observations`` and ``point_outside_domain``.
    """
    findings = []
    mask = ds.mask
    vals = ds.values
    bad = np.argwhere((mask == 0) & (vals != 0))
    for i, m in bad:
        findings.append(Finding("value_nonzero_under_zero_mask", int(i), int(m)))
    for i, m in np.argwhere(~np.isfinite(vals)):
        findings.append(Finding("nonfinite_value", int(i), int(m)))

    if ds.regime.irregular_sampling:
        if ds.irregular is None:
            findings.append(Finding("irregular_missing", detail="irregular regime without (T, Y) pairs"))
        else:
            for i, (t, y) in enumerate(ds.irregular):
                if t.size == 0:
                    findings.append(Finding("subject_without_observations", i))
                elif np.any((t < 0) | (t > 1)):
                    findings.append(Finding("point_outside_domain", i))
                if not np.all(np.isfinite(y)) or not np.all(np.isfinite(t)):
                    findings.append(Finding("nonfinite_value", i))
        return findings or [OK]

    if ds.regime is Regime.FULL and (not np.all(mask == 1) or ds.irregular is not None):
        findings.append(Finding("full_regime_incomplete_mask"))
    for m in np.flatnonzero(mask.sum(axis=0) == 0):
        findings.append(Finding("column_unidentifiable", column=int(m)))
    if design is not None:
        from .regression import RCOND_MIN, column_conditions

        rcond = column_conditions(design.Xtilde, mask, reference=design.X)
        for m in np.flatnonzero((rcond < RCOND_MIN) & (mask.sum(axis=0) > 0)):
            findings.append(Finding("rank_deficient_at", column=int(m)))
    return findings or [OK]

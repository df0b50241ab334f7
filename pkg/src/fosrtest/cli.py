"""Command-line front end.

Subcommands: ``test``, ``fit``, ``smooth``, ``basis`` and ``simulate``. Exit
status is 0 on success, 1 for invalid input (bad flags, malformed files,
unidentifiable models) and 2 for internal errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .basis import BasisKind, parse_hypothesis
from .core import FunctionalDataset, Grid, RankError, Regime, SparsityError, validate_dataset
from .inference import PipelineError, TestOptions, run_test
from .regression import orthogonalize, pointwise_wls
from .rng import fresh_seed, resolve_threads
from .sim import Scenario, SimulationScenario, run_experiment
from .smoothing import KernelFamily, KernelSpec, loocv_bandwidth, smooth_dataset

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_INTERNAL = 0, 1, 2

SWEEP_D = (0.0, 0.3, 0.6, 0.9, 1.2, 1.5)
SWEEP_TAU = (1.0, 0.8, 0.67)
LARGE_SCALE = 5000


class InputError(ValueError):
    """Invalid user input, optionally tied to a file line."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


# ingestion ---------------------------------------------------------------------


def _open_csv(path: str):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open: {exc.strerror}", path) from None
    return fh


def _float(text: str, path: str, line: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"column {column!r}: {text!r} is not a number", path, line) from None
    if not np.isfinite(v):
        raise InputError(f"column {column!r}: value must be finite", path, line)
    return v


def read_long_csv(path: str):
    """Read ``subject_id,t,y`` rows; returns ``(ids, {id: (t, y)})`` in first-seen order."""
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError("empty file; expected header subject_id,t,y", path, 1)
        header = [h.strip().lstrip("﻿") for h in header]
        if header[:3] != ["subject_id", "t", "y"] or len(header) != 3:
            raise InputError(f"header must be subject_id,t,y (got {','.join(header)})", path, 1)
        data: dict = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise InputError(f"expected 3 fields, found {len(row)}", path, line)
            sid = row[0].strip()
            if not sid:
                raise InputError("empty subject_id", path, line)
            t = _float(row[1], path, line, "t")
            y = _float(row[2], path, line, "y")
            if not 0.0 <= t <= 1.0:
                raise InputError(f"t = {t} lies outside [0, 1]", path, line)
            ts, ys = data.setdefault(sid, ([], []))
            if t in ts:
                raise InputError(f"duplicate observation for subject {sid!r} at t = {t}", path, line)
            ts.append(t)
            ys.append(y)
    if not data:
        raise InputError("no observations", path)
    out = {}
    for sid, (ts, ys) in data.items():
        order = np.argsort(ts)
        out[sid] = (np.asarray(ts)[order], np.asarray(ys)[order])
    return list(data), out


def read_wide_csv(path: str):
    """Read ``subject_id,<t_1>,...,<t_N>`` rows; empty cells are unobserved."""
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise InputError("header must be subject_id followed by grid points", path, 1)
        if header[0].strip().lstrip("﻿") != "subject_id":
            raise InputError("first column must be subject_id", path, 1)
        t = np.array([_float(h, path, 1, "header") for h in header[1:]])
        if np.any(np.diff(t) <= 0) or t[0] < 0 or t[-1] > 1:
            raise InputError("grid points in the header must be strictly increasing within [0, 1]", path, 1)
        data = {}
        ids = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"expected {len(header)} fields, found {len(row)}", path, line)
            sid = row[0].strip()
            if sid in data:
                raise InputError(f"duplicate subject_id {sid!r}", path, line)
            keep = [k for k, c in enumerate(row[1:]) if c.strip()]
            y = np.array([_float(row[k + 1], path, line, header[k + 1]) for k in keep])
            data[sid] = (t[keep], y)
            ids.append(sid)
    if not data:
        raise InputError("no observations", path)
    return ids, data


def build_dataset(ids, data, regime: Optional[str], grid_size: int) -> FunctionalDataset:
    """Map per-subject observations to a dataset.

    Without an irregular regime the grid is the union of observed points; a
    subject missing some of them makes the dataset partial. Irregular regimes
    keep the raw pairs and use a uniform grid of ``grid_size`` points.
    """
    requested = Regime.parse(regime) if regime else None
    if requested is not None and requested.irregular_sampling:
        grid = Grid.uniform(grid_size)
        pairs = [data[s] for s in ids]
        return FunctionalDataset.from_irregular(grid, pairs, requested, subject_ids=tuple(ids))
    points = np.unique(np.concatenate([data[s][0] for s in ids]))
    if points.size < 2:
        raise InputError("need at least two distinct observation points")
    grid = Grid(points)
    values = np.zeros((len(ids), points.size))
    mask = np.zeros((len(ids), points.size), dtype=np.int8)
    for i, s in enumerate(ids):
        idx = np.searchsorted(points, data[s][0])
        values[i, idx] = data[s][1]
        mask[i, idx] = 1
    if requested is Regime.FULL and not mask.all():
        raise InputError("regime 'full' requested but some subjects miss grid points")
    regime = Regime.FULL if mask.all() and requested is not Regime.PARTIAL else Regime.PARTIAL
    return FunctionalDataset(grid, values, mask, regime, subject_ids=tuple(ids))


def read_design(path: str, roles_path: Optional[str], x_cols, z_cols, intercept: str):
    """Read the design CSV and split it into tested (X) and nuisance (Z) columns.

    Roles come from ``x_cols``/``z_cols`` when given, else from a JSON sidecar
    ``{"x": [...], "z": [...]}`` (default ``<design>.roles.json``).
    """
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError("empty design file", path, 1)
        header = [h.strip().lstrip("﻿") for h in header]
        if header[0] != "subject_id":
            raise InputError("first column must be subject_id", path, 1)
        rows, ids = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"expected {len(header)} fields, found {len(row)}", path, line)
            sid = row[0].strip()
            if sid in ids:
                raise InputError(f"duplicate subject_id {sid!r}", path, line)
            ids.append(sid)
            rows.append([_float(c, path, line, header[k + 1]) for k, c in enumerate(row[1:])])
    columns = header[1:]
    if x_cols is None and z_cols is None:
        roles_path = roles_path or path + ".roles.json"
        try:
            with open(roles_path, encoding="utf-8") as fh:
                roles = json.load(fh)
        except FileNotFoundError:
            raise InputError(
                "no column roles: pass --x-cols/--z-cols or provide a roles file", roles_path
            ) from None
        except json.JSONDecodeError as exc:
            raise InputError(f"invalid JSON ({exc.msg})", roles_path, exc.lineno) from None
        if not isinstance(roles, dict):
            raise InputError('roles file must be an object {"x": [...], "z": [...]}', roles_path)
        x_cols, z_cols = roles.get("x", []), roles.get("z", [])
    x_cols, z_cols = list(x_cols or []), list(z_cols or [])
    for name in x_cols + z_cols:
        if name not in columns:
            raise InputError(f"unknown design column {name!r}; available: {', '.join(columns)}", path)
    if set(x_cols) & set(z_cols):
        raise InputError(f"columns assigned to both X and Z: {sorted(set(x_cols) & set(z_cols))}", path)
    M = np.asarray(rows, dtype=float).reshape(len(ids), len(columns))
    X = M[:, [columns.index(c) for c in x_cols]]
    Z = M[:, [columns.index(c) for c in z_cols]]
    ones = np.ones((len(ids), 1))
    if intercept == "x":
        X, x_cols = np.hstack([ones, X]), ["intercept"] + x_cols
    elif intercept == "z":
        Z, z_cols = np.hstack([ones, Z]), ["intercept"] + z_cols
    if X.shape[1] == 0:
        raise InputError("no tested (X) columns", path)
    return ids, X, Z, tuple(x_cols), tuple(z_cols)


def _load(args):
    if args.wide:
        ids, data = read_wide_csv(args.data)
    else:
        ids, data = read_long_csv(args.data)
    ds = build_dataset(ids, data, args.regime, args.grid)
    return ids, data, ds


def _load_with_design(args):
    ids, data, ds = _load(args)
    d_ids, X, Z, xn, zn = read_design(args.design, args.roles, _split(args.x_cols), _split(args.z_cols), args.intercept)
    missing = [s for s in ids if s not in d_ids]
    if missing:
        raise InputError(f"subjects without a design row: {missing[:5]}", args.design)
    order = [d_ids.index(s) for s in ids]
    dp = orthogonalize(X[order], Z[order], xn, zn)
    return ds, dp


def _describe(f) -> str:
    where = [f"{k} {v}" for k, v in (("subject", f.subject), ("column", f.column)) if v is not None]
    return f.kind + (f" ({', '.join(where)})" if where else "") + (f": {f.detail}" if f.detail else "")


def _split(text):
    if text is None:
        return None
    return [c.strip() for c in text.split(",") if c.strip()]


def _seed(args) -> int:
    if args.seed is None:
        s = fresh_seed()
        print(f"seed: {s}", file=sys.stderr)
        return s
    return args.seed


def _write(text: str, out: Optional[str]):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


# subcommands ---------------------------------------------------------------------


def cmd_test(args) -> int:
    ds, dp = _load_with_design(args)
    findings = [f for f in validate_dataset(ds, dp) if not f.ok]
    fatal = [f for f in findings if f.kind not in ("column_unidentifiable", "rank_deficient_at")]
    if fatal:
        raise InputError("; ".join(_describe(f) for f in fatal[:5]))
    basis = parse_hypothesis(args.null, ds.grid)
    opts = TestOptions(
        alpha=args.alpha,
        B=args.B,
        seed=_seed(args),
        standardize=not args.unstandardized,
        kernel=KernelFamily(args.kernel),
        bandwidth=args.bandwidth,
        cov_method=args.cov,
        orthogonalization=args.orthogonalization,
        leverage_correction=not args.no_leverage_correction,
        pi_method=args.pi,
        threads=resolve_threads(args.threads),
    )
    report = run_test(ds, dp, basis, opts)
    report.diagnostics["hypothesis"] = args.null
    report.diagnostics["basis_kind"] = basis.kind.value
    _write(report.to_json() + "\n", args.out)
    return EXIT_OK


def cmd_fit(args) -> int:
    ds, dp = _load_with_design(args)
    if ds.regime.irregular_sampling:
        raise InputError("fit works on gridded curves; run `smooth` first for irregular data")
    fit = pointwise_wls(ds, dp, method=args.orthogonalization)
    names = list(dp.x_names or [f"x{j + 1}" for j in range(dp.p)])
    rows = [[_fmt(t)] + [_fmt(v) for v in fit.beta_hat[:, m]] + [int(fit.effective_n[m])] for m, t in enumerate(ds.grid.points)]
    _write(_csv_text(["t"] + names + ["n_observed"], rows), args.out)
    return EXIT_OK


def cmd_smooth(args) -> int:
    ids, data = (read_wide_csv if args.wide else read_long_csv)(args.data)
    grid = Grid.uniform(args.grid)
    ds = FunctionalDataset.from_irregular(grid, [data[s] for s in ids], Regime.IRREGULAR_NOISY, subject_ids=tuple(ids))
    family = KernelFamily(args.kernel)
    if args.bandwidth is None:
        h, _ = loocv_bandwidth(ds, family, threads=resolve_threads(args.threads))
    else:
        h = args.bandwidth
    print(f"bandwidth: {h!r}", file=sys.stderr)
    sm = smooth_dataset(ds, KernelSpec(family, h), grid, threads=resolve_threads(args.threads))
    rows = []
    for i, sid in enumerate(ids):
        for m in np.flatnonzero(sm.mask[i]):
            rows.append([sid, _fmt(grid.points[m]), _fmt(sm.values[i, m])])
    _write(_csv_text(["subject_id", "t", "y"], rows), args.out)
    return EXIT_OK


def cmd_basis(args) -> int:
    grid = Grid.uniform(args.grid)
    basis = parse_hypothesis(args.null, grid)
    if basis.kind is BasisKind.EMPTY:
        raise InputError("the zero hypothesis has no basis functions to export")
    header = ["t"] + [f"v{k + 1}" for k in range(basis.r)]
    rows = [[_fmt(t)] + [_fmt(v) for v in basis.functions[:, m]] for m, t in enumerate(grid.points)]
    _write(_csv_text(header, rows), args.out)
    return EXIT_OK


def _configs(args, seed: int):
    if args.figure3:
        out = []
        for tau in SWEEP_TAU:
            for d in SWEEP_D:
                for regime in Regime:
                    out.append(SimulationScenario(n=args.n, scenario=Scenario.B, d=d, tau=tau, regime=regime, seed=seed))
        return out
    return [
        SimulationScenario(
            n=args.n, N_grid=args.grid, scenario=args.scenario, d=args.d, tau=args.tau,
            regime=args.regime or Regime.FULL, p_miss=args.p_miss, k_miss=args.k_miss,
            N_obs=args.n_obs, noise_sd=args.noise_sd, seed=seed,
        )
    ]


def cmd_simulate(args) -> int:
    reps, B = args.reps, args.B
    if args.paper_scale:
        reps, B = LARGE_SCALE, LARGE_SCALE
        print(f"warning: --paper-scale runs {reps} replicates with {B} null draws each; expect hours", file=sys.stderr)
    seed = _seed(args)
    threads = resolve_threads(args.threads)
    rows = []
    for sc in _configs(args, seed):
        res = run_experiment(sc, reps, alpha=args.alpha, B=B, threads=threads, hypothesis_r=args.hypothesis_r)
        row = res.row()
        row["standard_error"] = res.standard_error
        if not args.timing:
            row.pop("mean_runtime")
        rows.append(row)
        log.info("%s d=%s tau=%s: %.3f", sc.regime.value, sc.d, sc.tau, res.rejection_rate)
    header = list(rows[0])
    _write(_csv_text(header, [[r[k] for k in header] for r in rows]), args.out)
    return EXIT_OK


# parser ------------------------------------------------------------------------------


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _unit_interval(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not (v > 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError("must be a positive number")
    return v


def _add_common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, help="master seed for all randomness; drawn and printed to stderr if omitted")
    p.add_argument("--threads", type=_positive_int, help="worker cap; defaults to $FOSR_THREADS, then the CPU count")
    p.add_argument("--out", help="output file (default: standard output)")


def _add_data(p, design=True):
    p.add_argument("--data", required=True, help="curves CSV in long format subject_id,t,y (t in [0, 1])")
    p.add_argument("--wide", action="store_true", help="read --data as wide CSV: subject_id then one column per grid point, blank = unobserved")
    p.add_argument("--grid", type=_positive_int, default=100, help="uniform grid size for irregular regimes (default 100)")
    if design:
        p.add_argument("--design", required=True, help="design CSV: subject_id followed by covariate columns")
        p.add_argument("--roles", help='JSON role map {"x": [...], "z": [...]} (default <design>.roles.json)')
        p.add_argument("--x-cols", help="comma-separated tested covariate columns (overrides the roles file)")
        p.add_argument("--z-cols", help="comma-separated nuisance covariate columns (overrides the roles file)")
        p.add_argument(
            "--intercept", choices=["none", "x", "z"], default="none",
            help="add a constant column to the tested (x) or nuisance (z) covariates (default none)",
        )
        p.add_argument(
            "--orthogonalization", choices=["local", "global"], default="local",
            help="orthogonalize X against Z among subjects observed at each point (local) or once over the sample (global)",
        )
    p.add_argument(
        "--regime", choices=[r.value for r in Regime],
        help="sampling regime; default inferred (full if every subject is observed at every point, else partial)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fosrtest", description="Shape-constraint tests for function-on-scalar regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}", help="print the version and exit")
    parser.add_argument("--json-errors", action="store_true", help="report errors as a JSON object on stderr")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("test", help="test H0: every coefficient function lies in the null span", description="Run the test and print the report as JSON.")
    _add_data(p)
    p.add_argument("--null", default="poly:4", help="null span: zero, poly:R or pwlinear:k0,...,1 (default poly:4)")
    p.add_argument("--alpha", type=_unit_interval, default=0.05, help="test level (default 0.05)")
    p.add_argument("--B", type=_positive_int, default=5000, help="Monte Carlo draws from the null law (default 5000)")
    p.add_argument("--kernel", choices=[k.value for k in KernelFamily], default="epanechnikov", help="smoothing kernel for irregular regimes")
    p.add_argument("--bandwidth", type=_positive_float, help="smoothing bandwidth; chosen by leave-one-out CV if omitted")
    p.add_argument("--cov", choices=["empirical", "smoothed"], default="empirical", help="residual covariance estimator (default empirical)")
    p.add_argument("--pi", choices=["design", "moments"], default="design", help="partial-sampling factor: from the fitted design or from mask moments")
    p.add_argument("--unstandardized", action="store_true", help="partial regimes: use the unstandardized statistic and null surface")
    p.add_argument("--no-leverage-correction", action="store_true", help="do not rescale residuals by their leverage before estimating the covariance")
    _add_common(p)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("fit", help="write the pointwise coefficient estimates as CSV", description="Pointwise weighted least squares; one row per grid point.")
    _add_data(p)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("smooth", help="smooth irregular curves onto a grid", description="Nadaraya-Watson smoothing; uncovered grid points are omitted from the output.")
    _add_data(p, design=False)
    p.add_argument("--kernel", choices=[k.value for k in KernelFamily], default="epanechnikov", help="kernel family (default epanechnikov)")
    p.add_argument("--bandwidth", type=_positive_float, help="bandwidth; chosen by pooled leave-one-out CV if omitted")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("basis", help="write an orthonormal null-span basis as CSV", description="One row per grid point: t, v1, ..., vr.")
    p.add_argument("--null", required=True, help="poly:R or pwlinear:k0,...,1")
    p.add_argument("--grid", type=_positive_int, default=100, help="number of uniform grid points on [0, 1] (default 100)")
    p.add_argument("--out", help="output file (default: standard output)")
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("simulate", help="empirical size and power on synthetic data", description="Rejection rates over simulated replicates, one CSV row per configuration.")
    p.add_argument("--scenario", choices=["A", "B"], default="A", help="deviation shape: A (sine series) or B (fifth polynomial)")
    p.add_argument("--d", type=float, default=0.0, help="deviation magnitude (default 0, the null)")
    p.add_argument("--tau", type=float, default=1.0, help="local-alternative rate in [0, 1]: deviation scaled by n^(-tau/2)")
    p.add_argument("--n", type=_positive_int, default=100, help="subjects per replicate (default 100)")
    p.add_argument("--grid", type=_positive_int, default=100, help="grid points per curve (default 100)")
    p.add_argument("--regime", choices=[r.value for r in Regime], help="sampling regime (default full)")
    p.add_argument("--p-miss", type=_positive_int, default=3, help="missing-interval order-statistic index p (default 3)")
    p.add_argument("--k-miss", type=_positive_int, default=3, help="missing-interval spacing k (default 3)")
    p.add_argument("--n-obs", type=_positive_int, help="observations per subject in irregular regimes (default 80, or 60 with missing intervals)")
    p.add_argument("--noise-sd", type=float, default=0.5, help="measurement-error s.d. in irregular regimes (default 0.5)")
    p.add_argument("--reps", type=_positive_int, default=100, help="replicates per configuration (default 100)")
    p.add_argument("--alpha", type=_unit_interval, default=0.05, help="test level (default 0.05)")
    p.add_argument("--B", type=_positive_int, default=1000, help="null draws per test (default 1000)")
    p.add_argument("--hypothesis-r", type=_positive_int, default=4, help="null span: polynomials of degree < r (default 4)")
    p.add_argument("--figure3", action="store_true", help="scenario-B preset: every regime over d in 0..1.5 and tau in {1, 0.8, 0.67}")
    p.add_argument("--paper-scale", action="store_true", help="5000 replicates and 5000 null draws per configuration (slow)")
    p.add_argument("--timing", action="store_true", help="add mean seconds per replicate (makes output non-reproducible)")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


# entry point ----------------------------------------------------------------------


def _classify(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, PipelineError) else exc
    if isinstance(cause, (InputError, ValueError, RankError, SparsityError, FileNotFoundError)):
        return EXIT_INVALID
    return EXIT_INTERNAL


def _report_error(exc: BaseException, code: int, as_json: bool):
    if as_json:
        cause = exc.cause if isinstance(exc, PipelineError) else exc
        payload = {
            "error": type(cause).__name__,
            "message": str(cause),
            "exit_code": code,
            "stage": getattr(exc, "stage", None),
            "file": getattr(cause, "path", None),
            "line": getattr(cause, "line", None),
        }
        print(json.dumps(payload), file=sys.stderr)
    else:
        prefix = "error" if code == EXIT_INVALID else "internal error"
        print(f"{prefix}: {exc}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except Exception as exc:
        code = _classify(exc)
        _report_error(exc, code, as_json)
        return code


if __name__ == "__main__":
    sys.exit(main())

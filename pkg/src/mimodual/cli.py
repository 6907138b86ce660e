"""Command-line experiment runner.

Four subcommands: ``run`` solves one problem over an SNR x realization grid
and writes a per-run trace CSV plus an aggregate CSV; ``sweep`` does the same
over the default six-point SNR grid and prints a monotonicity check of the
mean objective; ``compare`` pairs the per-iteration objectives of the reduced
and full algorithm on matched seeds; ``verify`` runs the oracle suites and
exits nonzero if any fails.

Configuration comes from an INI file with sections system / budget / weights /
solver / sweep; command-line flags override file values.  Output is CSV only,
formatted with %.12g so a rerun with the same seed is byte-identical.

Exit codes: 0 ok, 1 verification or solve failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import model, solver, verify

__all__ = ["ExperimentConfig", "main", "run", "sweep", "compare", "run_verify"]

DEFAULT_SNR_DB = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
DESK_REALIZATIONS = 20
PAPER_REALIZATIONS = 100

AGGREGATE_COLUMNS = (
    "problem", "snr_db", "mean_objective", "std_objective",
    "mean_total_power_mw", "mean_max_weighted_mse",
    "mean_outer_iterations", "converged_fraction",
)
TRACE_COLUMNS = (
    "snr_db", "realization", "outer_iter", "objective", "total_power_mw",
    "max_weighted_mse", "weighted_mse_spread", "status",
)
COMPARE_COLUMNS = (
    "snr_db", "realization", "outer_iter",
    "objective_reduced", "objective_full",
)
VERIFY_COLUMNS = ("suite", "instances", "max_deviation", "tolerance", "passed")


class UsageError(ValueError):
    """Configuration or argument problem; maps to exit code 2."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs: system, budget, weights, schedule."""

    problem: str = "P1"
    n_tx: int = 4
    rx_antennas: tuple = (2, 2)
    streams: tuple = (2, 2)
    noise_ratios: tuple | None = None
    budget_mode: str = "combined"
    per_antenna_mw: tuple = (2.5,)
    per_symbol_mw: tuple = (2.5,)
    per_user_mw: tuple = (5.0,)
    per_entry_mw: float = 0.625
    total_mw: float = 10.0
    symbol_weights: tuple = (1.0,)
    user_weights: tuple = (1.0,)
    snr_list: tuple = DEFAULT_SNR_DB
    realizations: int = DESK_REALIZATIONS
    seed: int = 0
    out: str = "results"
    algorithm: str = "full"
    max_outer: int = 200
    tol: float = 1e-6
    workers: int = 1

    def __post_init__(self):
        if self.problem not in solver.PROBLEM_IDS:
            raise UsageError(f"unknown problem id {self.problem!r}")
        if self.realizations < 1:
            raise UsageError("realizations must be at least 1")
        if not self.snr_list:
            raise UsageError("snr_list must not be empty")
        if self.algorithm not in ("full", "reduced"):
            raise UsageError("algorithm must be 'full' or 'reduced'")
        if self.workers < 1:
            raise UsageError("workers must be at least 1")
        if self.problem == "P5" and self.budget_mode not in ("combined", "entrywise"):
            raise UsageError("P5 admits only its entrywise budget")

    @property
    def n_users(self):
        return len(self.rx_antennas)

    @property
    def total_streams(self):
        return sum(self.streams)

    def system(self):
        return model.SystemConfig(self.n_tx, tuple(self.rx_antennas),
                                  tuple(self.streams))

    def weights(self):
        """Weight vector at the problem's granularity, scalars broadcast."""
        if self.problem in ("P2", "P4"):
            return _broadcast(self.user_weights, self.n_users, "user weights")
        if self.problem == "P8":
            return np.ones(self.total_streams)
        return _broadcast(self.symbol_weights, self.total_streams,
                          "symbol weights")

    def budget(self):
        """Power caps for the chosen problem and budget mode, in mW."""
        if self.problem == "P5":
            entry = np.full((self.total_streams, self.n_tx),
                            float(self.per_entry_mw))
            return model.PowerBudget(entrywise=entry, total=float(self.total_mw),
                                     mode="entrywise")
        if self.budget_mode == "total":
            return model.PowerBudget(total=float(self.total_mw), mode="total")
        kw = {"per_antenna": _broadcast(self.per_antenna_mw, self.n_tx,
                                        "per-antenna caps"),
              "total": float(self.total_mw), "mode": "combined"}
        if self.problem in ("P2", "P4"):
            kw["per_user"] = _broadcast(self.per_user_mw, self.n_users,
                                        "per-user caps")
        else:
            kw["per_symbol"] = _broadcast(self.per_symbol_mw,
                                          self.total_streams, "per-symbol caps")
        return model.PowerBudget(**kw)

    def problem_spec(self):
        mode = "entrywise" if self.problem == "P5" else self.budget_mode
        return solver.ProblemSpec(self.problem, self.weights(),
                                  budget_mode=mode,
                                  streams=tuple(self.streams))

    def solve_options(self):
        return solver.SolveOptions(outer_tol=self.tol, max_outer=self.max_outer)


def _broadcast(values, size, what):
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 1:
        arr = np.full(size, arr[0])
    if arr.size != size:
        raise UsageError(f"{what}: expected 1 or {size} values, got {arr.size}")
    return arr


def _parse_number_list(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise UsageError("empty number list")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def _parse_int_list(text):
    return tuple(int(round(v)) for v in _parse_number_list(text))


def load_config(path):
    """Read an INI config file into an ExperimentConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    return apply_config(ExperimentConfig(), parser)


def apply_config(base, parser):
    updates = {}

    def take(section, key, convert, dest=None):
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            try:
                updates[dest or key] = convert(raw)
            except UsageError:
                raise
            except ValueError as exc:
                raise UsageError(f"[{section}] {key} = {raw!r}: {exc}") from exc

    take("system", "problem", str.strip, "problem")
    take("system", "n_tx", int)
    take("system", "rx_antennas", _parse_int_list)
    take("system", "streams", _parse_int_list)
    take("system", "noise_ratios", _parse_number_list)
    take("budget", "mode", str.strip, "budget_mode")
    take("budget", "per_antenna_mw", _parse_number_list)
    take("budget", "per_symbol_mw", _parse_number_list)
    take("budget", "per_user_mw", _parse_number_list)
    take("budget", "per_entry_mw", float)
    take("budget", "total_mw", float)
    take("weights", "symbol", _parse_number_list, "symbol_weights")
    take("weights", "user", _parse_number_list, "user_weights")
    take("solver", "algorithm", str.strip)
    take("solver", "max_outer", int)
    take("solver", "tol", float)
    take("solver", "workers", int)
    take("sweep", "snr_db", _parse_number_list, "snr_list")
    take("sweep", "realizations", int)
    take("sweep", "seed", int)
    take("sweep", "out", str.strip)
    return replace(base, **updates)


def apply_flags(cfg, args):
    """Command-line flags override config-file values."""
    updates = {}
    if getattr(args, "problem", None):
        updates["problem"] = args.problem
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "snr_list", None):
        updates["snr_list"] = _parse_number_list(args.snr_list)
    if getattr(args, "realizations", None) is not None:
        updates["realizations"] = args.realizations
    if getattr(args, "out", None):
        updates["out"] = args.out
    if getattr(args, "max_iter", None) is not None:
        updates["max_outer"] = args.max_iter
    if getattr(args, "tol", None) is not None:
        updates["tol"] = args.tol
    if getattr(args, "workers", None) is not None:
        updates["workers"] = args.workers
    if getattr(args, "algorithm", None):
        updates["algorithm"] = args.algorithm
    if getattr(args, "paper_scale", False):
        updates["realizations"] = PAPER_REALIZATIONS
    return replace(cfg, **updates) if updates else cfg


# ---------------------------------------------------------------------------
# solving one grid cell

@dataclass(frozen=True)
class CellResult:
    snr_db: float
    realization: int
    trace_rows: tuple
    final_objective: float
    final_total_power: float
    final_max_weighted: float
    iterations: int
    converged: bool
    error: str = ""


def _max_weighted_mse(cfg_weights, granularity, streams, symbol_mse):
    if granularity == "symbol":
        return float(np.max(cfg_weights * symbol_mse))
    user_vals = []
    start = 0
    for s in streams:
        user_vals.append(float(np.sum(symbol_mse[start:start + s])))
        start += s
    return float(np.max(cfg_weights * np.asarray(user_vals)))


def solve_cell(cfg, snr_db, realization):
    """One (snr, realization) solve; returns trace rows plus final stats."""
    system = cfg.system()
    spec = cfg.problem_spec()
    budget = cfg.budget()
    ch = model.generate_channels(system, cfg.seed, realization)
    noise = model.noise_for_snr(system, cfg.total_mw, snr_db,
                                ratios=cfg.noise_ratios)
    runner = (solver.run_algorithm2 if cfg.algorithm == "full"
              else solver.run_algorithm1)
    try:
        _, trace = runner(spec, ch, noise, budget, cfg.solve_options())
    except solver.MonotonicityError as exc:
        return CellResult(snr_db, realization, (), np.nan, np.nan, np.nan,
                          0, False, error=str(exc))
    weights = spec.weights
    streams = tuple(cfg.streams)
    rows = []
    n = len(trace.records)
    for i, rec in enumerate(trace.records, start=1):
        if i == n:
            status = "converged" if trace.converged else "max_outer"
        else:
            status = rec.gp_status or "transfer"
        rows.append((snr_db, realization, i, rec.objective, rec.total_power,
                     _max_weighted_mse(weights, spec.granularity, streams,
                                       rec.symbol_mse),
                     rec.weighted_spread, status))
    final = trace.final
    return CellResult(
        snr_db, realization, tuple(rows), final.objective, final.total_power,
        _max_weighted_mse(weights, spec.granularity, streams, final.symbol_mse),
        trace.iterations, trace.converged)


def _solve_cell_star(payload):
    cfg, snr_db, realization = payload
    return solve_cell(cfg, snr_db, realization)


def _solve_grid(cfg, log):
    """All (snr, realization) cells, gathered in sorted-key order."""
    keys = [(si, r) for si in range(len(cfg.snr_list))
            for r in range(cfg.realizations)]
    results = {}
    if cfg.workers == 1:
        for si, r in keys:
            results[(si, r)] = solve_cell(cfg, cfg.snr_list[si], r)
    else:
        payloads = [(cfg, cfg.snr_list[si], r) for si, r in keys]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for key, res in zip(keys, pool.map(_solve_cell_star, payloads)):
                results[key] = res
    failures = []
    for key in sorted(results):
        res = results[key]
        if res.error:
            failures.append(res)
            log(f"solve failed at snr {res.snr_db:g} dB, "
                f"realization {res.realization}: {res.error}")
    return [results[key] for key in sorted(results)], failures


# ---------------------------------------------------------------------------
# CSV emission

def _fmt(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if np.isnan(v):
        return "nan"
    return f"{v:.12g}"


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _aggregate_rows(cfg, cells):
    rows = []
    for si, snr in enumerate(cfg.snr_list):
        group = [c for c in cells
                 if c.snr_db == snr and not c.error]
        if not group:
            rows.append((cfg.problem, snr, float("nan"), float("nan"),
                         float("nan"), float("nan"), float("nan"), 0.0))
            continue
        objectives = np.array([c.final_objective for c in group])
        rows.append((
            cfg.problem, snr,
            float(np.mean(objectives)), float(np.std(objectives)),
            float(np.mean([c.final_total_power for c in group])),
            float(np.mean([c.final_max_weighted for c in group])),
            float(np.mean([c.iterations for c in group])),
            float(np.mean([1.0 if c.converged else 0.0 for c in group])),
        ))
    return rows


def _emit_run_outputs(cfg, cells, out_dir, log):
    trace_rows = [row for c in cells for row in c.trace_rows]
    trace_path = out_dir / f"{cfg.problem.lower()}_trace.csv"
    agg_path = out_dir / f"{cfg.problem.lower()}_aggregate.csv"
    _write_csv(trace_path, TRACE_COLUMNS, trace_rows)
    agg_rows = _aggregate_rows(cfg, cells)
    _write_csv(agg_path, AGGREGATE_COLUMNS, agg_rows)
    log(f"wrote {trace_path} ({len(trace_rows)} rows) and {agg_path} "
        f"({len(agg_rows)} rows)")
    return agg_rows


def _log_noise_levels(cfg, log):
    for snr in cfg.snr_list:
        sigma_av = model.snr_to_sigma(cfg.total_mw, cfg.n_users, snr)
        log(f"snr {snr:g} dB: average noise variance "
            f"{model.sigma_av_db(sigma_av):.4f} dB re 1 mW")


# ---------------------------------------------------------------------------
# subcommands

def _run_and_emit(cfg, log):
    out_dir = Path(cfg.out)
    log(f"problem {cfg.problem} ({cfg.algorithm} algorithm), "
        f"{len(cfg.snr_list)} SNR points x {cfg.realizations} realizations, "
        f"seed {cfg.seed}")
    _log_noise_levels(cfg, log)
    cells, failures = _solve_grid(cfg, log)
    agg_rows = _emit_run_outputs(cfg, cells, out_dir, log)
    return (1 if failures else 0), agg_rows


def run(cfg, log=print):
    """Solve the configured grid and write trace + aggregate CSVs."""
    status, _ = _run_and_emit(cfg, log)
    return status


def sweep(cfg, log=print):
    """Run over the SNR grid and report mean-objective monotonicity."""
    status, agg_rows = _run_and_emit(cfg, log)
    means = [row[2] for row in agg_rows]
    monotone = all(b <= a + 1e-12 for a, b in zip(means, means[1:]))
    log("mean objective is "
        + ("nonincreasing in SNR" if monotone else "NOT monotone in SNR")
        + ": " + ", ".join(f"{m:.6g}" for m in means))
    return status


def compare(cfg, log=print):
    """Paired per-iteration objectives: reduced vs full algorithm."""
    out_dir = Path(cfg.out)
    log(f"comparing algorithms on {cfg.problem}, "
        f"{len(cfg.snr_list)} SNR points x {cfg.realizations} realizations")
    reduced_cells, fail1 = _solve_grid(replace(cfg, algorithm="reduced"), log)
    full_cells, fail2 = _solve_grid(replace(cfg, algorithm="full"), log)
    rows = []
    for red, ful in zip(reduced_cells, full_cells):
        n = max(len(red.trace_rows), len(ful.trace_rows))
        for i in range(n):
            obj_r = red.trace_rows[i][3] if i < len(red.trace_rows) else ""
            obj_f = ful.trace_rows[i][3] if i < len(ful.trace_rows) else ""
            rows.append((red.snr_db, red.realization, i + 1, obj_r, obj_f))
    path = out_dir / f"{cfg.problem.lower()}_compare.csv"
    _write_csv(path, COMPARE_COLUMNS, rows)
    log(f"wrote {path} ({len(rows)} rows)")
    return 1 if (fail1 or fail2) else 0


VERIFY_SUITES = ("roundtrip", "theorem2", "gp", "identity", "fixed-point")


def run_verify(suites, out_path=None, full=False, log=print):
    """Run the selected oracle suites; exit 1 if any fails."""
    unknown = [s for s in suites if s not in VERIFY_SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {', '.join(unknown)}; "
                         f"choose from {', '.join(VERIFY_SUITES)}")
    reports = []
    if "roundtrip" in suites:
        n_seeds = 25 if full else 5
        for pid in ("P1", "P2", "P3", "P4", "P5"):
            reports.append(verify.duality_roundtrip_suite(pid, range(n_seeds)))
        for pid in ("P1", "P2", "P3", "P4"):
            spec = solver.ProblemSpec(
                pid, _default_weights(pid), budget_mode="total",
                streams=(2, 2))
            reports.append(verify.duality_roundtrip_suite(
                spec, range(n_seeds),
                budget=model.PowerBudget(total=10.0, mode="total")))
    if "theorem2" in suites:
        reports.append(verify.theorem2_suite(500 if full else 100))
    if "gp" in suites:
        reports.append(verify.gp_oracle_suite(50 if full else 10))
    if "identity" in suites:
        reports.append(verify.identity_suite(100 if full else 50))
    if "fixed-point" in suites:
        reports.append(verify.fixed_point_suite(1000 if full else 200))
    failed = False
    rows = []
    for report in reports:
        log(str(report))
        row = report.as_row()
        rows.append(tuple(row[c] for c in VERIFY_COLUMNS))
        failed = failed or not report.passed
    if out_path is not None:
        _write_csv(Path(out_path), VERIFY_COLUMNS, rows)
        log(f"wrote {out_path}")
    return 1 if failed else 0


def _default_weights(pid):
    if pid in ("P2", "P4"):
        return np.ones(2)
    return np.ones(4)


# ---------------------------------------------------------------------------
# argument parsing

def _add_common_flags(sub):
    sub.add_argument("--problem", choices=solver.PROBLEM_IDS,
                     help="problem id (overrides config)")
    sub.add_argument("--config", help="INI config file")
    sub.add_argument("--seed", type=int, help="base RNG seed")
    sub.add_argument("--snr-list", dest="snr_list",
                     help="comma-separated SNR points in dB")
    sub.add_argument("--realizations", type=int,
                     help="channel realizations per SNR point")
    sub.add_argument("--out", help="output directory for CSV files")
    sub.add_argument("--max-iter", dest="max_iter", type=int,
                     help="outer iteration cap")
    sub.add_argument("--tol", type=float, help="outer convergence tolerance")
    sub.add_argument("--workers", type=int, help="worker pool size")
    sub.add_argument("--paper-scale", action="store_true",
                     help=f"use {PAPER_REALIZATIONS} realizations")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mimodual",
        description="Multiuser MIMO transceiver design experiments")
    subs = parser.add_subparsers(dest="command", required=True)

    p_run = subs.add_parser("run", help="solve one SNR x realization grid")
    _add_common_flags(p_run)
    p_run.add_argument("--algorithm", choices=("full", "reduced"),
                       help="full includes the GP power re-allocation")

    p_sweep = subs.add_parser(
        "sweep", help="run the default SNR grid and check monotonicity")
    _add_common_flags(p_sweep)
    p_sweep.add_argument("--algorithm", choices=("full", "reduced"))

    p_cmp = subs.add_parser(
        "compare", help="pair per-iteration objectives of both algorithms")
    _add_common_flags(p_cmp)

    p_ver = subs.add_parser("verify", help="run the oracle suites")
    p_ver.add_argument("--suite", default="all",
                       help="comma list of suites, or 'all'")
    p_ver.add_argument("--out", help="CSV report path")
    p_ver.add_argument("--full", action="store_true",
                       help="full-size suites instead of desk scale")
    return parser


def _config_from_args(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return apply_flags(cfg, args)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "verify":
            suites = (VERIFY_SUITES if args.suite.strip() == "all"
                      else tuple(s.strip() for s in args.suite.split(",")
                                 if s.strip()))
            return run_verify(suites, out_path=args.out, full=args.full)
        cfg = _config_from_args(args)
        if args.command == "run":
            return run(cfg)
        if args.command == "sweep":
            return sweep(cfg)
        if args.command == "compare":
            return compare(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: evaluate, benchmark and lambda sweeps.

A run is described by a JSON config (see :class:`RunConfig`).  Reports are
written as JSON (with the resolved config and a build identifier) or CSV.

Exit codes: 0 converged, 1 usage or config error, 2 not converged,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .core import DimensionError, DivergedDynamicsError, mad, residual, sequential_evaluate
from .deer import DeerConfig, SolveReport, deer_solve
from .elk import DEFAULT_LAMBDA_GRID, ElkConfig, NumericalError, elk_solve, lambda_sweep
from .models import fit_noisy_sine_argru, init_random, load_model, model_from_dict, stiff_tanh
from .scan import track_element_storage

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SOLVERS = ("sequential", "deer", "quasi-deer", "elk", "quasi-elk")
FORMATS = ("json", "csv")
BENCH_COLUMNS = ("solver", "T", "D", "seed", "rep", "wall_ms", "iters", "ms_per_iter",
                 "elem_bytes", "converged")
SWEEP_COLUMNS = ("lambda", "iters", "converged", "final_residual_norm", "selected")
EVAL_COLUMNS = ("solver", "T", "D", "seed", "iters", "converged", "final_residual_norm",
                "mad", "resets", "nonfinite_events", "wall_ms")
TIMING_FIELDS = ("wall_time", "wall_time_per_iteration", "wall_ms", "ms_per_iter", "summary")

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class RunConfig:
    """Everything needed to reproduce a run.

    ``solver``, ``T`` and ``D`` may be lists for ``benchmark``, which runs
    their Cartesian product over ``seeds`` (default ``[seed]``).  ``model`` is
    either ``{"kind": ..., **options}``, ``{"path": file}`` or a full
    serialized model document.  ``D`` may be ``None`` for models whose state
    size is implied (the AR-GRU variants and serialized models).
    """

    schema_version: int = SCHEMA_VERSION
    model: dict = field(default_factory=lambda: {"kind": "gru"})
    solver: str | list = "deer"
    T: int | list = 1024
    D: int | list | None = 4
    seed: int = 0
    seeds: list | None = None
    tol: float = 1e-8
    max_iters: int | None = None
    lam: float | None = None
    lambda_grid: list | None = None
    inference: str = "filter"
    workers: int | None = None
    repetitions: int = 1
    warmup: int = 5
    output: str | None = None
    format: str = "json"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {d['schema_version']!r}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, command: str | None = None) -> None:
        """Check field values; ``command`` adds the per-command requirements."""
        for s in _as_list(self.solver):
            if s not in SOLVERS:
                raise ConfigError(f"unknown solver {s!r}; expected one of {SOLVERS}")
        for T in _as_list(self.T):
            if not isinstance(T, int) or T < 1:
                raise ConfigError(f"T must be a positive integer, got {T!r}")
        for D in _as_list(self.D):
            if D is not None and (not isinstance(D, int) or D < 1):
                raise ConfigError(f"D must be a positive integer, got {D!r}")
        if not isinstance(self.model, dict):
            raise ConfigError("model must be an object")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.inference not in ("filter", "smoother"):
            raise ConfigError(f"inference must be 'filter' or 'smoother', got {self.inference!r}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.lam is not None and not self.lam > 0:
            raise ConfigError("lam must be positive")
        if self.lambda_grid is not None:
            if not self.lambda_grid or any(not v > 0 for v in self.lambda_grid):
                raise ConfigError("lambda_grid must be a non-empty list of positive values")
        if command in ("evaluate", "benchmark") and self.lam is None and any(
                s.endswith("elk") for s in _as_list(self.solver)):
            raise ConfigError("elk solvers need a positive lam")


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return RunConfig.from_dict(d)


def build_id() -> str:
    """``git describe`` of the source tree, or the package version outside git."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def build_model(desc: dict, T: int, D: int | None, seed: int):
    """Construct the model described by ``desc`` for a length-``T`` run."""
    desc = dict(desc)
    if "path" in desc:
        try:
            return load_model(desc["path"])
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read model {desc['path']}: {exc}") from None
    if "schema_version" in desc:
        return model_from_dict(desc)
    kind = desc.pop("kind", None)
    seed = desc.pop("seed", seed)
    try:
        if kind == "noisy_sine_argru":
            return fit_noisy_sine_argru(seed, T, **desc)
        if kind == "stiff_tanh":
            return stiff_tanh(seed, D=D or 4, **desc)
        return init_random(kind, seed, D=D, T=T, **desc)
    except TypeError as exc:
        raise ConfigError(f"bad model options: {exc}") from None


def _scan_mode(workers: int | None) -> str:
    return "sequential" if workers == 1 else "parallel"


def run_solver(model, solver: str, T: int, cfg: RunConfig, lam: float | None = None):
    """Run one solver from the all-zeros trace; returns ``(trace, report)``."""
    if solver == "sequential":
        start = time.perf_counter()
        trace = sequential_evaluate(model, T)
        rep = SolveReport(converged=True)
        rep.final_residual_norm = float(np.max(np.abs(residual(trace, model))))
        rep.wall_time = time.perf_counter() - start
        return trace, rep
    init = np.zeros((T, model.state_dim), dtype=model.dtype)
    common = {"max_iters": cfg.max_iters, "tol": cfg.tol, "workers": cfg.workers,
              "scan_mode": _scan_mode(cfg.workers)}
    mode = "diagonal" if solver.startswith("quasi") else "dense"
    if solver.endswith("deer"):
        return deer_solve(init, model, DeerConfig(mode=mode, **common))
    lam = cfg.lam if lam is None else lam
    return elk_solve(init, model, ElkConfig(lam=lam, mode=mode, inference=cfg.inference, **common))


def _header(cfg: RunConfig, command: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "build": build_id(),
            "config": cfg.to_dict()}


def cmd_evaluate(cfg: RunConfig):
    """Run one solver and compare with the sequential oracle.

    Returns:
        ``(exit_code, report)``
    """
    solver, T, D = cfg.solver, cfg.T, cfg.D
    if isinstance(solver, list) or isinstance(T, list) or isinstance(D, list):
        raise ConfigError("evaluate takes a single solver, T and D")
    model = build_model(cfg.model, T, D, cfg.seed)
    oracle = sequential_evaluate(model, T)
    trace, rep = run_solver(model, solver, T, cfg)
    with np.errstate(all="ignore"):
        err = mad(trace, oracle)
    report = _header(cfg, "evaluate")
    report.update({
        "solver": solver, "T": T, "D": model.state_dim, "seed": cfg.seed,
        "mad": err if np.isfinite(err) else None,
        "report": rep.to_dict(),
    })
    return (EXIT_OK if rep.converged else EXIT_NOT_CONVERGED), report


def _summarize(rows) -> list:
    groups = {}
    for row in rows:
        groups.setdefault((row["solver"], row["T"], row["D"]), []).append(row)
    out = []
    for (solver, T, D), rs in groups.items():
        wall = np.array([r["wall_ms"] for r in rs])
        per = np.array([r["ms_per_iter"] for r in rs])
        out.append({"solver": solver, "T": T, "D": D, "runs": len(rs),
                    "wall_ms_mean": float(wall.mean()), "wall_ms_std": float(wall.std()),
                    "ms_per_iter_mean": float(per.mean()), "ms_per_iter_std": float(per.std())})
    return out


def _bench_row(solver, T, D, seed, rep_idx, rep, storage) -> dict:
    iters = rep.iterations
    wall_ms = round(rep.wall_time * 1e3, 3)
    per = round(sum(rep.wall_time_per_iteration) * 1e3 / iters, 3) if iters else 0.0
    return {"solver": solver, "T": T, "D": D, "seed": seed, "rep": rep_idx,
            "wall_ms": wall_ms, "iters": iters, "ms_per_iter": per,
            "elem_bytes": storage.peak_matrix_bytes, "converged": bool(rep.converged)}


def cmd_benchmark(cfg: RunConfig):
    """Time every (solver, T, D, seed) combination over ``repetitions`` runs.

    ``warmup`` untimed runs precede the timed ones for each (solver, T, D).

    Returns:
        ``(exit_code, report)`` where the report holds one row per timed run.
    """
    seeds = cfg.seeds if cfg.seeds is not None else [cfg.seed]
    rows = []
    all_converged = True
    for T in _as_list(cfg.T):
        for D in _as_list(cfg.D):
            for solver in _as_list(cfg.solver):
                warm = cfg.warmup
                for seed in seeds:
                    model = build_model(cfg.model, T, D, seed)
                    for _ in range(warm):
                        run_solver(model, solver, T, cfg)
                    warm = 0
                    for rep_idx in range(cfg.repetitions):
                        with track_element_storage() as storage:
                            _, rep = run_solver(model, solver, T, cfg)
                        rows.append(_bench_row(solver, T, model.state_dim, seed, rep_idx,
                                               rep, storage))
                        all_converged &= rep.converged
    report = _header(cfg, "benchmark")
    report["rows"] = rows
    report["summary"] = _summarize(rows)
    return (EXIT_OK if all_converged else EXIT_NOT_CONVERGED), report


def cmd_sweep(cfg: RunConfig):
    """Sweep the ELK damping over ``lambda_grid`` (default ``10^0..10^7``).

    Returns:
        ``(exit_code, report)``; the exit code is 2 if no grid point converged.
    """
    solver = cfg.solver
    if solver not in ("elk", "quasi-elk"):
        raise ConfigError("sweep needs solver 'elk' or 'quasi-elk'")
    if isinstance(cfg.T, list) or isinstance(cfg.D, list):
        raise ConfigError("sweep takes a single T and D")
    grid = cfg.lambda_grid if cfg.lambda_grid is not None else list(DEFAULT_LAMBDA_GRID)
    model = build_model(cfg.model, cfg.T, cfg.D, cfg.seed)
    init = np.zeros((cfg.T, model.state_dim), dtype=model.dtype)
    mode = "diagonal" if solver == "quasi-elk" else "dense"
    base = ElkConfig(mode=mode, inference=cfg.inference, max_iters=cfg.max_iters, tol=cfg.tol,
                     workers=cfg.workers, scan_mode=_scan_mode(cfg.workers))
    result = lambda_sweep(init, model, base, grid)
    rows = [{"lambda": lam, "iters": rep.iterations, "converged": bool(rep.converged),
             "final_residual_norm": rep.final_residual_norm,
             "selected": result.best_lambda == lam}
            for lam, rep in zip(result.lambdas, result.reports)]
    report = _header(cfg, "sweep")
    report.update({"T": cfg.T, "D": model.state_dim, "seed": cfg.seed,
                   "best_lambda": result.best_lambda, "rows": rows})
    return (EXIT_OK if result.found else EXIT_NOT_CONVERGED), report


COMMANDS = {"evaluate": cmd_evaluate, "benchmark": cmd_benchmark, "sweep": cmd_sweep}


def _eval_row(report) -> dict:
    rep = report["report"]
    return {"solver": report["solver"], "T": report["T"], "D": report["D"],
            "seed": report["seed"], "iters": rep["iterations"], "converged": rep["converged"],
            "final_residual_norm": rep["final_residual_norm"], "mad": report["mad"],
            "resets": len(rep["reset_events"]), "nonfinite_events": rep["nonfinite_events"],
            "wall_ms": round(rep["wall_time"] * 1e3, 3)}


def format_report(report: dict, fmt: str) -> str:
    """Serialize a report as JSON or as CSV rows."""
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    command = report["command"]
    if command == "benchmark":
        columns, rows = BENCH_COLUMNS, report["rows"]
    elif command == "sweep":
        columns, rows = SWEEP_COLUMNS, report["rows"]
    else:
        columns, rows = EVAL_COLUMNS, [_eval_row(report)]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in columns})
    return buf.getvalue()


def _parse_cell(text: str):
    if text in ("True", "False"):
        return text == "True"
    if text == "":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_report(text: str, fmt: str):
    """Inverse of :func:`format_report`: a dict for JSON, a list of rows for CSV."""
    if fmt == "json":
        return json.loads(text)
    return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(io.StringIO(text))]


def strip_timing(obj):
    """Drop wall-clock fields so reports can be compared across runs."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pareval", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver events")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--output", help="report path; standard output when omitted")
        p.add_argument("--format", choices=FORMATS, help="report format")
        p.add_argument("--workers", type=int, help="scan worker threads; 1 = sequential scan")
        p.add_argument("--seed", type=int, help="overrides the config seed")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for name in ("output", "format", "workers", "seed"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.command == "sweep" and cfg.solver == RunConfig.solver:
        cfg.solver = "elk"
    cfg.validate(args.command)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        code, report = COMMANDS[args.command](cfg)
    except (ConfigError, DimensionError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergedDynamicsError, NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    text = format_report(report, cfg.format)
    if cfg.output:
        try:
            Path(cfg.output).write_text(text)
        except OSError as exc:
            print(f"cannot write report: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())

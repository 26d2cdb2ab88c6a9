"""DEER and quasi-DEER: undamped (quasi-)Newton on the trace residual.

Each Newton system is block lower-bidiagonal, so the update solves the linear
recurrence ``ds_1 = -r_1``, ``ds_t = J_t ds_{t-1} - r_t`` where ``J_t`` is the
dynamics Jacobian (or its diagonal) at the previous iterate.  The recurrence is
evaluated with :func:`pareval.scan.inclusive_scan`.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import DynamicsModel, as_trace, mad, residual
from .scan import DenseAffine, DiagAffine, inclusive_scan

__all__ = [
    "MODES",
    "DeerConfig",
    "SolveReport",
    "build_elements",
    "deer_step",
    "deer_solve",
    "converged_prefix",
]

log = logging.getLogger(__name__)

MODES = ("dense", "diagonal")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass
class DeerConfig:
    """Settings for :func:`deer_solve`.

    ``max_iters=None`` means ``T`` Newton iterations, raised to ``10 * T`` as
    soon as the reset heuristic fires.  ``reset_policy="nonfinite"`` overwrites
    only non-finite entries; ``"suffix"`` overwrites every row from the first
    bad one onward.
    """

    mode: str = "dense"
    max_iters: int | None = None
    tol: float = 1e-8
    reset_value: float = 0.0
    reset_policy: str = "nonfinite"
    record_history: bool = True
    scan_mode: str = "parallel"
    workers: int | None = None
    chunk_size: int | None = None

    def __post_init__(self):
        _check_mode(self.mode)
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.reset_policy not in ("nonfinite", "suffix"):
            raise ValueError(f"unknown reset_policy {self.reset_policy!r}")
        if not np.isfinite(self.reset_value):
            raise ValueError("reset_value must be finite")


@dataclass
class SolveReport:
    """Per-iteration diagnostics shared by every iterative solver.

    Histories hold one entry per Newton iteration, measured on the iterate the
    step produced (before any reset).  ``reset_events`` holds
    ``(iteration, first_bad_row)`` pairs.
    """

    iterations: int = 0
    converged: bool = False
    final_residual_norm: float = float("inf")
    residual_norm_history: list = field(default_factory=list)
    merit_history: list = field(default_factory=list)
    mad_history: list = field(default_factory=list)
    reset_events: list = field(default_factory=list)
    nonfinite_events: int = 0
    wall_time_per_iteration: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reset_events"] = [list(e) for e in self.reset_events]
        return d


def _scan_kwargs(config) -> dict:
    return {"mode": config.scan_mode, "workers": config.workers, "chunk_size": config.chunk_size}


def _elements(trace, r, model, mode):
    T, D = trace.shape
    b = -r
    if mode == "dense":
        A = np.empty((T, D, D), dtype=trace.dtype)
        A[0] = 0.0
        if T > 1:
            A[1:] = model.jacobian_all(trace[:-1], start=1)
        return DenseAffine(A, b)
    a = np.empty((T, D), dtype=trace.dtype)
    a[0] = 0.0
    if T > 1:
        a[1:] = model.jacobian_diag_all(trace[:-1], start=1)
    return DiagAffine(a, b)


def build_elements(trace, model: DynamicsModel, mode: str = "dense"):
    """Scan elements of the Newton recurrence at the iterate ``trace``.

    Element 0 is ``(0, -r_1)`` and encodes the initial condition; element
    ``t`` is ``(df/ds at s_{t-1}, -r_t)``, with the Jacobian replaced by its
    diagonal in ``"diagonal"`` mode.

    Raises:
        ValueError: if ``trace`` has non-finite entries (reset it first).
    """
    _check_mode(mode)
    trace = as_trace(trace, model)
    if not np.all(np.isfinite(trace)):
        raise ValueError("trace contains non-finite entries; reset before building elements")
    return _elements(trace, residual(trace, model), model, mode)


def _step(trace, r, model, mode, scan_kwargs):
    out = inclusive_scan(_elements(trace, r, model, mode), **scan_kwargs)
    # element 0 has a zero transition, so every prefix's offset is the update
    return trace + out.b


def deer_step(trace, model: DynamicsModel, mode: str = "dense", *, scan_mode: str = "parallel",
              workers: int | None = None, chunk_size: int | None = None) -> np.ndarray:
    """One (quasi-)Newton iterate ``s + ds``; may contain non-finite values."""
    _check_mode(mode)
    trace = as_trace(trace, model)
    if not np.all(np.isfinite(trace)):
        raise ValueError("trace contains non-finite entries; reset before stepping")
    kw = {"mode": scan_mode, "workers": workers, "chunk_size": chunk_size}
    return _step(trace, residual(trace, model), model, mode, kw)


def _max_abs(r) -> float:
    m = float(np.max(np.abs(r)))
    return m if np.isfinite(m) else float("inf")


def _first_bad_row(trace) -> int | None:
    bad = ~np.all(np.isfinite(trace), axis=1)
    return int(np.argmax(bad)) if bad.any() else None


def converged_prefix(trace, model: DynamicsModel, tol: float = 1e-8) -> int:
    """Largest ``k`` such that rows ``1..k`` have max-abs residual ``<= tol``."""
    r = np.abs(residual(trace, model))
    ok = np.all(r <= tol, axis=1)
    return int(ok.size) if ok.all() else int(np.argmin(ok))


def deer_solve(initial, model: DynamicsModel, config: DeerConfig | None = None):
    """Iterate :func:`deer_step` until the max-abs residual is ``<= config.tol``.

    Before each step any non-finite entries are overwritten with
    ``config.reset_value`` and the event is logged.  Running out of iterations
    is not an error; the report's ``converged`` flag says what happened.

    Returns:
        ``(trace, report)``
    """
    config = config or DeerConfig()
    trace = np.array(as_trace(initial, model), copy=True)
    T = trace.shape[0]
    limit = config.max_iters if config.max_iters is not None else T
    report = SolveReport()
    start = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):
        trace = _iterate(trace, model, config, limit, report)
    report.wall_time = time.perf_counter() - start
    return trace, report


def _iterate(trace, model, config, limit, report):
    T = trace.shape[0]
    scan_kw = _scan_kwargs(config)
    while True:
        bad = _first_bad_row(trace)
        if bad is not None:
            if config.reset_policy == "suffix":
                trace[bad:] = config.reset_value
            else:
                trace[~np.isfinite(trace)] = config.reset_value
            report.reset_events.append((report.iterations, bad))
            report.nonfinite_events += 1
            if config.max_iters is None:
                limit = 10 * T
            log.debug("iteration %d: reset from row %d", report.iterations, bad)
        r = residual(trace, model)
        report.final_residual_norm = _max_abs(r)
        if report.final_residual_norm <= config.tol:
            report.converged = True
            break
        if report.iterations >= limit:
            break
        t0 = time.perf_counter()
        new = _step(trace, r, model, config.mode, scan_kw)
        report.wall_time_per_iteration.append(time.perf_counter() - t0)
        report.iterations += 1
        if config.record_history:
            r_new = residual(new, model)
            report.residual_norm_history.append(_max_abs(r_new))
            report.merit_history.append(0.5 * float(np.sum(r_new * r_new)))
            report.mad_history.append(mad(new, trace))
        trace = new
    return trace

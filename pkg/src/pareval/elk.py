"""ELK and quasi-ELK: Levenberg-Marquardt steps computed by Kalman inference.

With damping ``lam`` the step minimizing
``0.5 * ||r + J ds||^2 + 0.5 * lam * ||ds||^2`` is the posterior mode of a
linear Gaussian state-space model whose dynamics are the linearized ``f``
(unit process noise) and whose observations are the current iterate with
noise variance ``1 / lam``.  Filtering gives the (default) ELK update;
smoothing gives the exact Levenberg-Marquardt step.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .core import DynamicsModel, as_trace, mad, residual
from .deer import MODES, SolveReport, _check_mode, _max_abs
from .scan import inclusive_scan

__all__ = [
    "Lgssm",
    "FilterResult",
    "KalmanElement",
    "DiagKalmanElement",
    "NumericalError",
    "build_lgssm",
    "neg_log_joint",
    "kalman_filter_sequential",
    "kalman_filter_parallel",
    "kalman_smoother",
    "elk_step",
    "ElkConfig",
    "elk_solve",
    "SweepResult",
    "lambda_sweep",
    "DEFAULT_LAMBDA_GRID",
]

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.logspace(0, 7, 8))
RIDGE = 1e-12


class NumericalError(FloatingPointError):
    """A covariance or message matrix lost positive definiteness."""


def _check_lambda(lam) -> float:
    lam = float(lam)
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError(f"lambda must be positive and finite, got {lam}")
    return lam


@dataclass
class Lgssm:
    """Linearized model around an iterate.

    ``F`` holds the ``T - 1`` dynamics Jacobians (``(T-1, D, D)``, or
    ``(T-1, D)`` diagonals in ``"diagonal"`` mode) and ``c`` the matching
    offsets, so ``s_t ~ N(F_t s_{t-1} + c_t, I)``.  The first state is
    ``N(m1, I)`` and every ``y_t`` observes ``s_t`` with variance ``1 / lam``.
    """

    F: np.ndarray
    c: np.ndarray
    m1: np.ndarray
    y: np.ndarray
    lam: float
    mode: str = "dense"

    def __post_init__(self):
        _check_mode(self.mode)
        self.lam = _check_lambda(self.lam)
        T, D = self.y.shape
        want = (T - 1, D, D) if self.mode == "dense" else (T - 1, D)
        if self.F.shape != want or self.c.shape != (T - 1, D) or self.m1.shape != (D,):
            raise ValueError("inconsistent LGSSM shapes")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def D(self) -> int:
        return self.y.shape[1]

    def predict_mean(self, prev):
        """Linearized dynamics mean for rows ``1..T-1`` given rows ``0..T-2``."""
        if self.mode == "dense":
            return np.einsum("tij,tj->ti", self.F, prev) + self.c
        return self.F * prev + self.c


def build_lgssm(trace, model: DynamicsModel, lam: float, mode: str = "dense") -> Lgssm:
    """Linearize ``model`` around ``trace`` into an :class:`Lgssm`."""
    _check_mode(mode)
    lam = _check_lambda(lam)
    trace = as_trace(trace, model)
    if not np.all(np.isfinite(trace)):
        raise ValueError("trace contains non-finite entries")
    T, D = trace.shape
    m1 = model.step(0, model.initial_state)
    if T > 1:
        prev = trace[:-1]
        f = model.step_all(prev, start=1)
        if mode == "dense":
            F = model.jacobian_all(prev, start=1)
            c = f - np.einsum("tij,tj->ti", F, prev)
        else:
            F = model.jacobian_diag_all(prev, start=1)
            c = f - F * prev
    else:
        F = np.empty((0, D, D) if mode == "dense" else (0, D), dtype=trace.dtype)
        c = np.empty((0, D), dtype=trace.dtype)
    return Lgssm(F, c, m1, trace.copy(), lam, mode)


def _gauss_nll(x, var):
    """``-log N(x | 0, var I)`` summed over the last axis (and all others)."""
    k = x.size
    return 0.5 * float(np.sum(x * x)) / var + 0.5 * k * np.log(2 * np.pi * var)


def neg_log_joint(m: Lgssm, states) -> float:
    """Negative log joint density of ``states`` (``(T, D)``) under ``m``."""
    states = np.asarray(states)
    out = _gauss_nll(states[0] - m.m1, 1.0)
    out += _gauss_nll(m.y - states, 1.0 / m.lam)
    if m.T > 1:
        out += _gauss_nll(states[1:] - m.predict_mean(states[:-1]), 1.0)
    return out


@dataclass
class FilterResult:
    """Filtered (or smoothed) posterior moments.

    ``covariances`` is ``(T, D, D)`` in dense mode and ``(T, D)`` variances
    in diagonal mode.
    """

    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: float | None = None


def kalman_filter_sequential(m: Lgssm) -> FilterResult:
    """Classical predict/update recursion.

    Raises:
        NumericalError: if an innovation covariance is not positive definite.
    """
    T, D = m.T, m.D
    r = 1.0 / m.lam
    dtype = m.y.dtype
    means = np.empty((T, D), dtype)
    if m.mode == "diagonal":
        covs = np.empty((T, D), dtype)
        mu, P = m.m1.copy(), np.ones(D, dtype)
        ll = 0.0
        for t in range(T):
            if t:
                mu = m.F[t - 1] * mu + m.c[t - 1]
                P = m.F[t - 1] ** 2 * P + 1.0
            S = P + r
            if not np.all(S > 0):
                raise NumericalError(f"non-positive innovation variance at row {t}")
            innov = m.y[t] - mu
            ll -= 0.5 * float(np.sum(innov**2 / S + np.log(2 * np.pi * S)))
            K = P / S
            mu = mu + K * innov
            P = (1.0 - K) * P
            means[t], covs[t] = mu, P
        return FilterResult(means, covs, ll)

    covs = np.empty((T, D, D), dtype)
    mu, P = m.m1.copy(), np.eye(D, dtype=dtype)
    eye = np.eye(D, dtype=dtype)
    ll = 0.0
    for t in range(T):
        if t:
            F = m.F[t - 1]
            mu = F @ mu + m.c[t - 1]
            P = F @ P @ F.T + eye
        S = P + r * eye
        try:
            cho = linalg.cho_factor(S)
        except linalg.LinAlgError:
            raise NumericalError(f"innovation covariance not positive definite at row {t}") from None
        innov = m.y[t] - mu
        ll -= 0.5 * float(innov @ linalg.cho_solve(cho, innov)
                          + 2 * np.sum(np.log(np.diag(cho[0]))) + D * np.log(2 * np.pi))
        K = linalg.cho_solve(cho, P).T  # P S^{-1}, both symmetric
        mu = mu + K @ innov
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
        means[t], covs[t] = mu, P
    return FilterResult(means, covs, ll)


def _batched_solve(M, rhs):
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        log.warning("singular Kalman message system; adding ridge %g", RIDGE)
        return np.linalg.solve(M + RIDGE * np.eye(M.shape[-1]), rhs)


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


class KalmanElement(NamedTuple):
    """Conditional-Gaussian message ``(A, b, C, eta, J)`` of the filtering scan.

    ``(A, b, C)`` parameterize ``p(s_t | s_{t-1}, y)`` as ``N(A s + b, C)``;
    ``(eta, J)`` are the information-form likelihood of the observations as
    a function of ``s_{t-1}``.
    """

    A: np.ndarray
    b: np.ndarray
    C: np.ndarray
    eta: np.ndarray
    J: np.ndarray

    matrix_fields = ("A", "C", "J")

    @staticmethod
    def combine(ei: "KalmanElement", ej: "KalmanElement") -> "KalmanElement":
        D = ei.b.shape[-1]
        batch = np.broadcast_shapes(ei.A.shape[:-2], ej.A.shape[:-2])
        mat = lambda x: np.broadcast_to(x, batch + (D, D))
        vec = lambda x: np.broadcast_to(x, batch + (D,))
        Ai, Ci, Ji, Aj, Cj, Jj = map(mat, (ei.A, ei.C, ei.J, ej.A, ej.C, ej.J))
        bi, etai, bj, etaj = map(vec, (ei.b, ei.eta, ej.b, ej.eta))
        M = np.eye(D, dtype=bi.dtype) + Ci @ Jj
        X = _batched_solve(M, np.concatenate([Ai, (bi + _mv(Ci, etaj))[..., None], Ci], axis=-1))
        AjT = np.swapaxes(Aj, -1, -2)
        A = Aj @ X[..., :D]
        b = _mv(Aj, X[..., D]) + bj
        C = Aj @ X[..., D + 1:] @ AjT + Cj
        # I + J_j C_i is the transpose of M
        Y = _batched_solve(np.swapaxes(M, -1, -2),
                           np.concatenate([(etaj - _mv(Jj, bi))[..., None], Jj], axis=-1))
        AiT = np.swapaxes(Ai, -1, -2)
        eta = _mv(AiT, Y[..., 0]) + etai
        J = AiT @ Y[..., 1:] @ Ai + Ji
        C = 0.5 * (C + np.swapaxes(C, -1, -2))
        J = 0.5 * (J + np.swapaxes(J, -1, -2))
        return KalmanElement(A, b, C, eta, J)

    @classmethod
    def identity(cls, batch_shape, D, dtype=np.float64) -> "KalmanElement":
        shape = tuple(batch_shape)
        A = np.broadcast_to(np.eye(D, dtype=dtype), shape + (D, D)).copy()
        z2 = np.zeros(shape + (D, D), dtype)
        z1 = np.zeros(shape + (D,), dtype)
        return cls(A, z1, z2, z1.copy(), z2.copy())


class DiagKalmanElement(NamedTuple):
    """:class:`KalmanElement` with every matrix diagonal, stored as vectors."""

    A: np.ndarray
    b: np.ndarray
    C: np.ndarray
    eta: np.ndarray
    J: np.ndarray

    matrix_fields = ("A", "C", "J")

    @staticmethod
    def combine(ei: "DiagKalmanElement", ej: "DiagKalmanElement") -> "DiagKalmanElement":
        Ai, bi, Ci, etai, Ji = ei
        Aj, bj, Cj, etaj, Jj = ej
        inv = 1.0 / (1.0 + Ci * Jj)
        return DiagKalmanElement(
            Aj * inv * Ai,
            Aj * inv * (bi + Ci * etaj) + bj,
            Aj * inv * Ci * Aj + Cj,
            Ai * inv * (etaj - Jj * bi) + etai,
            Ai * inv * Jj * Ai + Ji,
        )

    @classmethod
    def identity(cls, batch_shape, D, dtype=np.float64) -> "DiagKalmanElement":
        shape = tuple(batch_shape) + (D,)
        z = np.zeros(shape, dtype)
        return cls(np.ones(shape, dtype), z, z.copy(), z.copy(), z.copy())


def filtering_elements(m: Lgssm):
    """Scan elements whose prefixes are the filtering distributions."""
    T, D = m.T, m.D
    dtype = m.y.dtype
    lam = m.lam
    w = lam / (1.0 + lam)      # gain with unit prior/process variance
    keep = 1.0 / (1.0 + lam)   # 1 - w
    b = np.empty((T, D), dtype)
    b[0] = keep * m.m1 + w * m.y[0]
    b[1:] = keep * m.c + w * m.y[1:]
    innov = (m.y[1:] - m.c) * w  # S^{-1} (y - c) with S = (1 + 1/lam) I
    if m.mode == "diagonal":
        A = np.empty((T, D), dtype)
        A[0] = 0.0
        A[1:] = keep * m.F
        C = np.full((T, D), keep, dtype)
        eta = np.zeros((T, D), dtype)
        eta[1:] = m.F * innov
        J = np.zeros((T, D), dtype)
        J[1:] = w * m.F**2
        return DiagKalmanElement(A, b, C, eta, J)
    eye = np.eye(D, dtype=dtype)
    A = np.zeros((T, D, D), dtype)
    A[1:] = keep * m.F
    C = np.broadcast_to(keep * eye, (T, D, D)).copy()
    eta = np.zeros((T, D), dtype)
    eta[1:] = np.einsum("tji,tj->ti", m.F, innov)
    J = np.zeros((T, D, D), dtype)
    J[1:] = w * np.einsum("tki,tkj->tij", m.F, m.F)
    return KalmanElement(A, b, C, eta, J)


def kalman_filter_parallel(m: Lgssm, *, scan_mode: str = "parallel", workers: int | None = None,
                           chunk_size: int | None = None) -> FilterResult:
    """Filtering by an associative scan over conditional-Gaussian messages."""
    out = inclusive_scan(filtering_elements(m), mode=scan_mode, workers=workers,
                         chunk_size=chunk_size)
    return FilterResult(out.b, out.C)


def kalman_smoother(m: Lgssm, filtered: FilterResult | None = None) -> FilterResult:
    """Rauch-Tung-Striebel pass; the means are the exact posterior mode."""
    f = filtered or kalman_filter_sequential(m)
    T = m.T
    means = f.means.copy()
    covs = f.covariances.copy()
    diag = m.mode == "diagonal"
    eye = None if diag else np.eye(m.D, dtype=means.dtype)
    for t in range(T - 2, -1, -1):
        F = m.F[t]
        if diag:
            pred_m = F * f.means[t] + m.c[t]
            pred_P = F**2 * f.covariances[t] + 1.0
            G = f.covariances[t] * F / pred_P
            means[t] = f.means[t] + G * (means[t + 1] - pred_m)
            covs[t] = f.covariances[t] + G**2 * (covs[t + 1] - pred_P)
        else:
            Pt = f.covariances[t]
            pred_m = F @ f.means[t] + m.c[t]
            pred_P = F @ Pt @ F.T + eye
            G = linalg.solve(pred_P, F @ Pt, assume_a="pos").T  # Pt F^T pred_P^{-1}
            means[t] = f.means[t] + G @ (means[t + 1] - pred_m)
            C = Pt + G @ (covs[t + 1] - pred_P) @ G.T
            covs[t] = 0.5 * (C + C.T)
    return FilterResult(means, covs, f.log_likelihood)


INFERENCE = ("filter", "smoother")


def _elk_update(m: Lgssm, inference: str, scan_kw: dict) -> np.ndarray:
    if inference == "filter":
        return kalman_filter_parallel(m, **scan_kw).means
    return kalman_smoother(m).means


def elk_step(trace, model: DynamicsModel, lam: float, mode: str = "dense",
             inference: str = "filter", *, scan_mode: str = "parallel",
             workers: int | None = None, chunk_size: int | None = None) -> np.ndarray:
    """One damped step: the posterior means of the linearized model."""
    if inference not in INFERENCE:
        raise ValueError(f"inference must be one of {INFERENCE}, got {inference!r}")
    m = build_lgssm(trace, model, lam, mode)
    kw = {"scan_mode": scan_mode, "workers": workers, "chunk_size": chunk_size}
    return _elk_update(m, inference, kw)


@dataclass
class ElkConfig:
    """Settings for :func:`elk_solve`; ``lam`` stays fixed across iterations."""

    lam: float = 1.0
    mode: str = "dense"
    inference: str = "filter"
    max_iters: int | None = None
    tol: float = 1e-8
    record_history: bool = True
    scan_mode: str = "parallel"
    workers: int | None = None
    chunk_size: int | None = None

    def __post_init__(self):
        _check_mode(self.mode)
        self.lam = _check_lambda(self.lam)
        if self.inference not in INFERENCE:
            raise ValueError(f"inference must be one of {INFERENCE}, got {self.inference!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


def elk_solve(initial, model: DynamicsModel, config: ElkConfig | None = None):
    """Iterate :func:`elk_step` to the residual tolerance.

    No reset heuristic is applied.  If an iterate ever turns non-finite the
    event is counted and the solve stops unconverged.

    Returns:
        ``(trace, report)``
    """
    config = config or ElkConfig()
    trace = np.array(as_trace(initial, model), copy=True)
    limit = config.max_iters if config.max_iters is not None else trace.shape[0]
    scan_kw = {"scan_mode": config.scan_mode, "workers": config.workers,
               "chunk_size": config.chunk_size}
    report = SolveReport()
    start = time.perf_counter()
    with np.errstate(all="ignore"):
        while True:
            r = residual(trace, model)
            report.final_residual_norm = _max_abs(r)
            if report.final_residual_norm <= config.tol:
                report.converged = True
                break
            if report.iterations >= limit:
                break
            t0 = time.perf_counter()
            m = build_lgssm(trace, model, config.lam, config.mode)
            new = _elk_update(m, config.inference, scan_kw)
            report.wall_time_per_iteration.append(time.perf_counter() - t0)
            report.iterations += 1
            if config.record_history:
                r_new = residual(new, model)
                report.residual_norm_history.append(_max_abs(r_new))
                report.merit_history.append(0.5 * float(np.sum(r_new * r_new)))
                report.mad_history.append(mad(new, trace))
            if not np.all(np.isfinite(new)):
                report.nonfinite_events += 1
                report.final_residual_norm = float("inf")
                log.warning("ELK iterate became non-finite at iteration %d", report.iterations)
                break
            trace = new
    report.wall_time = time.perf_counter() - start
    return trace, report


@dataclass
class SweepResult:
    """Outcome of :func:`lambda_sweep`; ``best_lambda`` is ``None`` if nothing converged."""

    best_lambda: float | None
    lambdas: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    traces: list = field(default_factory=list, repr=False)

    @property
    def found(self) -> bool:
        return self.best_lambda is not None


def lambda_sweep(initial, model: DynamicsModel, config: ElkConfig | None = None,
                 grid=DEFAULT_LAMBDA_GRID, keep_traces: bool = False) -> SweepResult:
    """Run :func:`elk_solve` for every damping value in ``grid``.

    The winner is the converged run with the fewest iterations; ties go to
    the smaller ``lam``.
    """
    grid = [float(v) for v in grid]
    if not grid:
        raise ValueError("lambda grid must be non-empty")
    config = config or ElkConfig()
    result = SweepResult(None)
    best = None
    for lam in grid:
        trace, rep = elk_solve(initial, model, replace(config, lam=lam))
        result.lambdas.append(lam)
        result.reports.append(rep)
        if keep_traces:
            result.traces.append(trace)
        if rep.converged:
            key = (rep.iterations, lam)
            if best is None or key < best:
                best = key
    result.best_lambda = None if best is None else best[1]
    return result


__all__ += ["filtering_elements", "MODES", "INFERENCE"]

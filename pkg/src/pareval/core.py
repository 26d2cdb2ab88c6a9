"""Traces, dynamics models, residuals and the sequential ground truth.

A trace is a plain ``(T, D)`` float array.  Row ``k`` holds the state
``s_{k+1}``; the initial state ``s_0`` belongs to the model and is never part
of the trace.  Likewise the map ``f_{k+1}`` that produces row ``k`` is
addressed by the 0-based index ``k`` everywhere in this package.
"""
from __future__ import annotations

import abc

import numpy as np

__all__ = [
    "DimensionError",
    "DivergedDynamicsError",
    "DynamicsModel",
    "as_trace",
    "previous_states",
    "residual",
    "sequential_evaluate",
    "merit",
    "merit_gradient",
    "mad",
]


class DimensionError(ValueError):
    """Raised when array shapes are inconsistent with each other or a model."""


class DivergedDynamicsError(FloatingPointError):
    """Sequential evaluation produced a non-finite state.

    Attributes:
        index: 0-based trace row of the first non-finite state.
    """

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"non-finite state at trace row {index} (t={index + 1})")


class DynamicsModel(abc.ABC):
    """Time-varying Markovian dynamics ``s_{k+1} = f_k(s_k)``.

    Subclasses implement :meth:`step` and :meth:`jacobian` for a single time
    index.  The ``*_all`` methods evaluate many consecutive maps at once and
    fall back to Python loops; bundled models override them with vectorized
    versions because every solver iteration calls them over the full trace.

    Models must be treated as read-only once constructed.
    """

    #: maximum sequence length the model can produce, ``None`` if unbounded
    horizon: int | None = None

    @property
    @abc.abstractmethod
    def state_dim(self) -> int:
        ...

    @property
    @abc.abstractmethod
    def initial_state(self) -> np.ndarray:
        ...

    @property
    def dtype(self):
        return self.initial_state.dtype

    @abc.abstractmethod
    def step(self, k: int, s: np.ndarray) -> np.ndarray:
        """Apply the map producing trace row ``k`` to the state ``s``."""

    @abc.abstractmethod
    def jacobian(self, k: int, s: np.ndarray) -> np.ndarray:
        """``D x D`` Jacobian of :meth:`step` with respect to ``s``."""

    def jacobian_diag(self, k: int, s: np.ndarray) -> np.ndarray:
        return np.diagonal(self.jacobian(k, s)).copy()

    def step_all(self, prev: np.ndarray, start: int = 0) -> np.ndarray:
        """Evaluate maps ``start, start+1, ...`` at the rows of ``prev``."""
        return np.stack([self.step(start + k, p) for k, p in enumerate(prev)])

    def jacobian_all(self, prev: np.ndarray, start: int = 0) -> np.ndarray:
        return np.stack([self.jacobian(start + k, p) for k, p in enumerate(prev)])

    def jacobian_diag_all(self, prev: np.ndarray, start: int = 0) -> np.ndarray:
        return np.stack(
            [self.jacobian_diag(start + k, p) for k, p in enumerate(prev)]
        )

    def check_length(self, T: int) -> None:
        if T < 1:
            raise DimensionError(f"sequence length must be positive, got {T}")
        if self.horizon is not None and T > self.horizon:
            raise DimensionError(
                f"model supports at most {self.horizon} steps, asked for {T}"
            )


def as_trace(trace, model: DynamicsModel | None = None) -> np.ndarray:
    """Validate ``trace`` as a ``(T, D)`` array, optionally against ``model``."""
    arr = np.asarray(trace)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"trace must be a non-empty T x D array, got {arr.shape}")
    if model is not None:
        if arr.shape[1] != model.state_dim:
            raise DimensionError(
                f"trace has D={arr.shape[1]} but model state_dim={model.state_dim}"
            )
        model.check_length(arr.shape[0])
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def previous_states(trace: np.ndarray, model: DynamicsModel) -> np.ndarray:
    """Rows ``s_0, s_1, ..., s_{T-1}``: the inputs to each map."""
    prev = np.empty_like(trace)
    prev[0] = model.initial_state
    prev[1:] = trace[:-1]
    return prev


def residual(trace, model: DynamicsModel) -> np.ndarray:
    """One-step errors ``r_k = s_{k+1} - f_k(s_k)`` for every row of ``trace``.

    Non-finite entries propagate into the result rather than raising.
    """
    trace = as_trace(trace, model)
    return trace - model.step_all(previous_states(trace, model))


def sequential_evaluate(model: DynamicsModel, T: int) -> np.ndarray:
    """Roll the dynamics forward ``T`` steps from the initial state.

    Raises:
        DivergedDynamicsError: if any produced state is non-finite.
    """
    model.check_length(T)
    out = np.empty((T, model.state_dim), dtype=model.dtype)
    s = model.initial_state
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(T):
            s = model.step(k, s)
            if not np.all(np.isfinite(s)):
                raise DivergedDynamicsError(k)
            out[k] = s
    return out


def merit(trace, model: DynamicsModel) -> float:
    """Half the squared Euclidean norm of the residual."""
    r = residual(trace, model)
    return 0.5 * float(np.sum(r * r))


def merit_gradient(trace, model: DynamicsModel) -> np.ndarray:
    """Gradient ``J(s)^T r(s)`` of :func:`merit`, computed blockwise.

    The residual Jacobian is block lower-bidiagonal with identity diagonal
    blocks and ``-df/ds`` below, so row ``k`` of the gradient only couples to
    the residual of row ``k + 1``.
    """
    trace = as_trace(trace, model)
    r = residual(trace, model)
    grad = r.copy()
    if trace.shape[0] > 1:
        jac = model.jacobian_all(trace[:-1], start=1)
        grad[:-1] -= np.einsum("kij,ki->kj", jac, r[1:])
    return grad


def mad(a, b) -> float:
    """Mean absolute discrepancy between two equally shaped traces."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))

"""Associative scans over batched monoid elements.

An element type is a ``NamedTuple`` of arrays that share leading batch
axes.  It provides a ``combine(left, right)`` static method (``left`` is the
earlier element) and an ``identity(batch_shape, D, dtype)`` class method.
``matrix_fields`` names the fields that scale with the transition storage;
they drive the storage accounting hook.

Two affine element algebras are provided for the recurrence
``x_t = A_t x_{t-1} + b_t``: :class:`DenseAffine` and :class:`DiagAffine`.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .core import DimensionError

__all__ = [
    "DenseAffine",
    "DiagAffine",
    "combine",
    "inclusive_scan",
    "default_chunk_size",
    "ElementStorage",
    "track_element_storage",
    "stack_elements",
]


class DenseAffine(NamedTuple):
    """Affine map ``x -> A x + b`` with a full ``(..., D, D)`` matrix."""

    A: np.ndarray
    b: np.ndarray

    matrix_fields = ("A",)

    @staticmethod
    def combine(e1: "DenseAffine", e2: "DenseAffine") -> "DenseAffine":
        return DenseAffine(e2.A @ e1.A, (e2.A @ e1.b[..., None])[..., 0] + e2.b)

    @classmethod
    def identity(cls, batch_shape, D, dtype=np.float64) -> "DenseAffine":
        A = np.broadcast_to(np.eye(D, dtype=dtype), tuple(batch_shape) + (D, D)).copy()
        return cls(A, np.zeros(tuple(batch_shape) + (D,), dtype))

    @property
    def dim(self) -> int:
        return self.b.shape[-1]


class DiagAffine(NamedTuple):
    """Affine map ``x -> a * x + b`` with a diagonal transition stored as a vector."""

    a: np.ndarray
    b: np.ndarray

    matrix_fields = ("a",)

    @staticmethod
    def combine(e1: "DiagAffine", e2: "DiagAffine") -> "DiagAffine":
        return DiagAffine(e2.a * e1.a, e2.a * e1.b + e2.b)

    @classmethod
    def identity(cls, batch_shape, D, dtype=np.float64) -> "DiagAffine":
        shape = tuple(batch_shape) + (D,)
        return cls(np.ones(shape, dtype), np.zeros(shape, dtype))

    @property
    def dim(self) -> int:
        return self.b.shape[-1]


def combine(e1, e2):
    """Compose two elements: apply ``e1`` first, then ``e2``.

    Raises:
        DimensionError: if the elements disagree in type or state dimension.
    """
    if type(e1) is not type(e2):
        raise DimensionError(f"cannot combine {type(e1).__name__} with {type(e2).__name__}")
    if e1.b.shape[-1] != e2.b.shape[-1]:
        raise DimensionError(f"dimension mismatch: {e1.b.shape[-1]} vs {e2.b.shape[-1]}")
    return type(e1).combine(e1, e2)


@dataclass
class ElementStorage:
    """Bytes of scan elements seen while a tracker is active.

    ``matrix_bytes`` counts the transition-like fields only (``A`` or the
    diagonal ``a``; the ``A, C, J`` blocks of Kalman elements); ``total_bytes``
    also counts the vector offsets.  Peaks are taken over scan calls.
    """

    calls: int = 0
    peak_matrix_bytes: int = 0
    peak_total_bytes: int = 0

    def record(self, elems) -> None:
        matrix = sum(getattr(elems, name).nbytes for name in type(elems).matrix_fields)
        total = sum(f.nbytes for f in elems)
        self.calls += 1
        self.peak_matrix_bytes = max(self.peak_matrix_bytes, matrix)
        self.peak_total_bytes = max(self.peak_total_bytes, total)


_tracker: contextvars.ContextVar[ElementStorage | None] = contextvars.ContextVar(
    "element_storage", default=None
)


@contextlib.contextmanager
def track_element_storage():
    """Record the storage of every top-level scan input within the block."""
    storage = ElementStorage()
    token = _tracker.set(storage)
    try:
        yield storage
    finally:
        _tracker.reset(token)


def stack_elements(elements):
    """Turn a sequence of single elements into one batched element."""
    if not isinstance(elements, tuple) or not hasattr(type(elements), "combine"):
        elements = list(elements)
        if not elements:
            raise ValueError("cannot scan an empty sequence")
        cls = type(elements[0])
        if any(type(e) is not cls for e in elements):
            raise DimensionError("mixed element types")
        try:
            return cls(*(np.stack(parts) for parts in zip(*elements)))
        except ValueError as exc:
            raise DimensionError(f"mixed element dimensions: {exc}") from None
    return elements


def _length(elems) -> int:
    return elems[0].shape[0]


def _take(elems, index):
    return type(elems)(*(f[index] for f in elems))


def _assign(out, index, value) -> None:
    for dst, src in zip(out, value):
        dst[index] = src


def _scan_sequential(elems):
    cls = type(elems)
    out = cls(*(np.array(f, copy=True) for f in elems))
    acc = _take(out, 0)
    for t in range(1, _length(elems)):
        acc = cls.combine(acc, _take(elems, t))
        _assign(out, t, acc)
    return out


@lru_cache(maxsize=None)
def _pool(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="pareval-scan")


def default_workers() -> int:
    return os.cpu_count() or 1


def default_chunk_size(T: int, workers: int) -> int:
    # each block position costs one vectorized combine, so the serial depth
    # is about chunk + T / chunk; keep chunk near sqrt(T)
    return max(16, math.isqrt(T) // 2)


def _fan_out(fn, n_items: int, workers: int) -> None:
    """Run ``fn(slice)`` over contiguous slices of ``range(n_items)``."""
    workers = max(1, min(workers, n_items))
    bounds = np.linspace(0, n_items, workers + 1).astype(int)
    slices = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if len(slices) == 1:
        fn(slices[0])
        return
    for fut in [_pool(workers).submit(fn, sl) for sl in slices]:
        fut.result()


def _scan_blocked(elems, workers: int, chunk_size: int):
    cls = type(elems)
    T = _length(elems)
    L = chunk_size
    P = -(-T // L)
    if P == 1:
        return _scan_sequential(elems)
    pad = P * L - T
    D = elems.b.shape[-1]
    if pad:
        ident = cls.identity((pad,), D, elems.b.dtype)
        elems = cls(*(np.concatenate([f, g]) for f, g in zip(elems, ident)))
    x = cls(*(f.reshape((P, L) + f.shape[1:]) for f in elems))
    out = cls(*(np.array(f, copy=True) for f in x))

    # pass 1: independent inclusive scans inside every chunk
    def local(sl):
        for j in range(1, L):
            _assign(out, (sl, j), cls.combine(_take(out, (sl, j - 1)), _take(x, (sl, j))))

    _fan_out(local, P, workers)

    # carries: inclusive scan of chunk totals
    totals = _take(out, (slice(None), L - 1))
    carries = _scan(totals, "parallel", workers, chunk_size)

    # pass 2: fold the carry of all earlier chunks into each chunk
    def propagate(sl):
        lo, hi = sl.start + 1, sl.stop + 1
        hi = min(hi, P)
        if hi <= lo:
            return
        carry = cls(*(f[lo - 1:hi - 1, None] for f in carries))
        _assign(out, slice(lo, hi), cls.combine(carry, _take(out, slice(lo, hi))))

    _fan_out(propagate, P - 1, workers)
    flat = cls(*(f.reshape((P * L,) + f.shape[2:]) for f in out))
    return _take(flat, slice(0, T))


def _scan(elems, mode, workers, chunk_size):
    if mode == "sequential" or _length(elems) <= chunk_size:
        return _scan_sequential(elems)
    return _scan_blocked(elems, workers, chunk_size)


def inclusive_scan(elements, mode: str = "parallel", workers: int | None = None,
                   chunk_size: int | None = None):
    """All-prefix composition: ``out[t] = combine(out[t-1], elements[t])``.

    Args:
        elements: a batched element (fields with leading length-``T`` axis) or
            a non-empty sequence of single elements of one type.
        mode: ``"sequential"`` for a plain left fold, ``"parallel"`` for the
            blocked reduce-then-propagate scan over a thread pool.
        workers: pool size for parallel mode; defaults to the CPU count.
        chunk_size: elements per block; defaults to
            :func:`default_chunk_size`.

    Returns:
        A batched element of the same type and length as the input.

    Non-finite values are carried through untouched.
    """
    if mode not in ("sequential", "parallel"):
        raise ValueError(f"mode must be 'sequential' or 'parallel', got {mode!r}")
    elems = stack_elements(elements)
    T = _length(elems)
    if T == 0:
        raise ValueError("cannot scan an empty sequence")
    storage = _tracker.get()
    if storage is not None:
        storage.record(elems)
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if chunk_size is None:
        chunk_size = default_chunk_size(T, workers)
    if chunk_size < 2:
        raise ValueError("chunk_size must be >= 2")
    return _scan(elems, mode, workers, chunk_size)

"""Dense tensor views, GEMM, and instrumentation counters.

A :class:`Tensor` is a non-owning view into arena-backed (or caller-owned)
storage. GEMM is delegated to numpy's BLAS-backed ``matmul`` behind the
engine's contract checks; a batched GEMM over leading dimensions counts as
a single call, the same way a strided-batched library call is one call.

Counters are per-engine-instance. Every GEMM and every fused/naive
elementwise pass increments exactly one counter exactly once, so tests can
assert the pass structure of a forward exactly.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import AliasingError, DimensionError


@dataclass
class Tensor:
    """Shaped view over externally owned storage. Never owns memory."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.base is None:
            # Re-wrap so the view's lifetime is visibly tied to the caller's
            # array rather than to this object.
            self.data = self.data.view()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def strides(self) -> tuple[int, ...]:
        """Element strides (row-major for contiguous tensors)."""
        item = self.data.itemsize
        return tuple(s // item for s in self.data.strides)

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def numpy(self) -> np.ndarray:
        return self.data


def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


class OpCounters:
    """Monotonic instrumentation counters, guarded for concurrent use."""

    def __init__(self):
        self._lock = threading.Lock()
        self.gemm_calls = 0
        self.fused_passes = 0
        self.naive_passes = 0
        self.bytes_moved_estimate = 0
        self.naive_intermediates = 0
        self.fused_kind_counts: dict[str, int] = {}
        self.naive_kind_counts: dict[str, int] = {}

    def count_gemm(self, nbytes: int):
        with self._lock:
            self.gemm_calls += 1
            self.bytes_moved_estimate += nbytes

    def count_fused(self, kind: str, nbytes: int):
        with self._lock:
            self.fused_passes += 1
            self.bytes_moved_estimate += nbytes
            self.fused_kind_counts[kind] = self.fused_kind_counts.get(kind, 0) + 1

    def count_naive(self, kind: str, passes: int, nbytes: int, intermediates: int = 0):
        with self._lock:
            self.naive_passes += passes
            self.bytes_moved_estimate += nbytes
            self.naive_intermediates += intermediates
            self.naive_kind_counts[kind] = self.naive_kind_counts.get(kind, 0) + passes

    def reset(self):
        with self._lock:
            self.gemm_calls = 0
            self.fused_passes = 0
            self.naive_passes = 0
            self.bytes_moved_estimate = 0
            self.naive_intermediates = 0
            self.fused_kind_counts = {}
            self.naive_kind_counts = {}

    def snapshot(self) -> "CounterSnapshot":
        with self._lock:
            return CounterSnapshot(
                gemm_calls=self.gemm_calls,
                fused_passes=self.fused_passes,
                naive_passes=self.naive_passes,
                bytes_moved_estimate=self.bytes_moved_estimate,
                naive_intermediates=self.naive_intermediates,
                fused_kind_counts=dict(self.fused_kind_counts),
                naive_kind_counts=dict(self.naive_kind_counts),
            )


@dataclass(frozen=True)
class CounterSnapshot:
    gemm_calls: int
    fused_passes: int
    naive_passes: int
    bytes_moved_estimate: int
    naive_intermediates: int
    fused_kind_counts: dict[str, int]
    naive_kind_counts: dict[str, int]

    def delta(self, earlier: "CounterSnapshot") -> "CounterSnapshot":
        return CounterSnapshot(
            gemm_calls=self.gemm_calls - earlier.gemm_calls,
            fused_passes=self.fused_passes - earlier.fused_passes,
            naive_passes=self.naive_passes - earlier.naive_passes,
            bytes_moved_estimate=self.bytes_moved_estimate - earlier.bytes_moved_estimate,
            naive_intermediates=self.naive_intermediates - earlier.naive_intermediates,
            fused_kind_counts={
                k: v - earlier.fused_kind_counts.get(k, 0)
                for k, v in self.fused_kind_counts.items()
                if v - earlier.fused_kind_counts.get(k, 0)
            },
            naive_kind_counts={
                k: v - earlier.naive_kind_counts.get(k, 0)
                for k, v in self.naive_kind_counts.items()
                if v - earlier.naive_kind_counts.get(k, 0)
            },
        )


class Timers:
    """Wall-clock accumulators for the profiling categories."""

    def __init__(self):
        self.buckets: dict[str, float] = {}

    def add(self, bucket: str, seconds: float):
        self.buckets[bucket] = self.buckets.get(bucket, 0.0) + seconds

    def get(self, bucket: str) -> float:
        return self.buckets.get(bucket, 0.0)

    def reset(self):
        self.buckets = {}


_global_counters = OpCounters()


def global_counters() -> OpCounters:
    return _global_counters


def reset_counters(counters: OpCounters | None = None):
    (counters or _global_counters).reset()


def read_counters(counters: OpCounters | None = None) -> CounterSnapshot:
    return (counters or _global_counters).snapshot()


def _check_no_alias(out: np.ndarray, *inputs: np.ndarray):
    for a in inputs:
        if np.may_share_memory(out, a):
            raise AliasingError("gemm output overlaps an input buffer")


def gemm(a, b, out, *, transpose_b: bool = False, accumulate: bool = False,
         counters: OpCounters | None = None, timers: Timers | None = None):
    """out = a @ b (optionally b transposed, optionally accumulated).

    2D only; see :func:`gemm_batched` for stacked operands. One call
    increments ``gemm_calls`` by one regardless of internal blocking.
    """
    A, B, O = as_array(a), as_array(b), as_array(out)
    if A.ndim != 2 or B.ndim != 2 or O.ndim != 2:
        raise DimensionError(f"gemm expects 2D operands, got {A.ndim}/{B.ndim}/{O.ndim}D")
    Bv = B.T if transpose_b else B
    if A.shape[1] != Bv.shape[0]:
        raise DimensionError(f"gemm inner dims differ: {A.shape} x {Bv.shape}")
    if O.shape != (A.shape[0], Bv.shape[1]):
        raise DimensionError(f"gemm output shape {O.shape}, expected {(A.shape[0], Bv.shape[1])}")
    _check_no_alias(O, A, B)

    t0 = time.perf_counter() if timers is not None else 0.0
    if accumulate:
        O += A @ Bv
    else:
        np.matmul(A, Bv, out=O)
    if timers is not None:
        timers.add("gemm", time.perf_counter() - t0)

    (counters or _global_counters).count_gemm(A.nbytes + B.nbytes + O.nbytes)


def gemm_batched(a, b, out, *, transpose_b: bool = False,
                 counters: OpCounters | None = None, timers: Timers | None = None):
    """Batched out[..., :, :] = a[..., :, :] @ b[..., :, :].

    Leading dimensions broadcast per numpy matmul rules. One call, one
    ``gemm_calls`` increment (strided-batched semantics).
    """
    A, B, O = as_array(a), as_array(b), as_array(out)
    if A.ndim < 3 or B.ndim < 3:
        raise DimensionError("gemm_batched expects stacked operands (>=3D)")
    Bv = B.swapaxes(-1, -2) if transpose_b else B
    if A.shape[-1] != Bv.shape[-2]:
        raise DimensionError(f"gemm_batched inner dims differ: {A.shape} x {Bv.shape}")
    _check_no_alias(O, A, B)

    t0 = time.perf_counter() if timers is not None else 0.0
    np.matmul(A, Bv, out=O)
    if timers is not None:
        timers.add("gemm", time.perf_counter() - t0)

    (counters or _global_counters).count_gemm(A.nbytes + B.nbytes + O.nbytes)

"""Numeric kernels used by the executor.

All kernels are deterministic: reductions run in a fixed order, so results
are bit-identical regardless of how many executors run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import IndexOutOfBounds, ShapeMismatch
from .tensor import DType, Tensor

# Keeps k * 255 * 255 * 4 well inside the S32 accumulator.
MAX_INNER_DIM = 8192

GATHER_KINDS = ("GatherNd", "QuantizedGatherNd")


@dataclass(frozen=True)
class GemmOffsets:
    alpha: int = 1
    beta: int = 0
    oa: int = 0
    ob: int = 0
    oc: int = 0

    def __post_init__(self):
        for name in ("oa", "ob"):
            v = getattr(self, name)
            if not -255 <= v <= 255:
                raise ValueError(f"{name}={v} outside [-255, 255]")
        for name in ("alpha", "beta"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def _check_2d(a: Tensor, b: Tensor) -> tuple[int, int, int]:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"gemm needs 2-d operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    return m, k, n


def gemm_f32(a: Tensor, b: Tensor) -> Tensor:
    """Row-major F32 product with plain F32 accumulation over k in order."""
    m, k, n = _check_2d(a, b)
    A, B = a.data, b.data
    acc = np.zeros((m, n), dtype=np.float32)
    for p in range(k):
        acc += np.multiply.outer(A[:, p], B[p, :])
    return Tensor(DType.F32, acc)


def gemm_s8u8s32(a: Tensor, b: Tensor, off: GemmOffsets = GemmOffsets(), c_in: Tensor | None = None) -> Tensor:
    """C = alpha*((A+oa)(B+ob)) + beta*C_in + oc, accumulated in S32.

    The offset product is expanded into A@B plus rank-1 corrections built
    from the row sums of A and the column sums of B, so the offset terms cost
    O(m*n) instead of another O(m*k*n) product.
    """
    if a.dtype is not DType.S8 or b.dtype is not DType.U8:
        raise TypeError(f"gemm_s8u8s32 needs S8 x U8, got {a.dtype.value} x {b.dtype.value}")
    m, k, n = _check_2d(a, b)
    if k > MAX_INNER_DIM:
        raise ValueError(f"inner dimension {k} exceeds {MAX_INNER_DIM}")
    A = a.data.astype(np.int32)
    B = b.data.astype(np.int32)
    i32 = np.int32
    ab = A @ B
    row_a = A.sum(axis=1, dtype=i32)[:, None]
    col_b = B.sum(axis=0, dtype=i32)[None, :]
    acc = ab + i32(off.ob) * row_a + i32(off.oa) * col_b + i32(k * off.oa * off.ob)
    acc = i32(off.alpha) * acc
    if off.beta:
        if c_in is None:
            raise ValueError("beta != 0 needs c_in")
        if c_in.shape != (m, n):
            raise ShapeMismatch(f"C_in has shape {c_in.shape}, expected {(m, n)}")
        acc = acc + i32(off.beta) * c_in.data.astype(i32)
    acc = acc + i32(off.oc)
    return Tensor(DType.S32, acc.astype(np.int32))


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data.astype(np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return Tensor(DType.F32, e / e.sum(axis=axis, keepdims=True))


def layer_norm(t: Tensor, gamma: Tensor, beta_p: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance."""
    d = t.shape[-1]
    if gamma.shape[-1:] != (d,) or beta_p.shape[-1:] != (d,):
        raise ShapeMismatch(f"gamma/beta last axis must be {d}")
    x = t.data.astype(np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mean) / np.sqrt(var + eps) * gamma.data.astype(np.float64) + beta_p.data.astype(np.float64)
    return Tensor(DType.F32, y)


def gather_nd(params: Tensor, indices: Tensor) -> Tensor:
    """out[i...] = params[indices[i..., :]]; dtype is preserved."""
    if indices.dtype is not DType.S32:
        raise TypeError("gather_nd indices must be S32")
    idx = indices.data
    if idx.ndim == 0:
        raise ShapeMismatch("indices must have at least one dimension")
    depth = idx.shape[-1]
    if depth > params.data.ndim:
        raise ShapeMismatch(f"index depth {depth} exceeds params rank {params.data.ndim}")
    bounds = np.asarray(params.shape[:depth])
    flat = idx.reshape(-1, depth)
    bad = np.any((flat < 0) | (flat >= bounds), axis=1)
    if bad.any():
        raise IndexOutOfBounds(flat[np.argmax(bad)], params.shape)
    out = params.data[tuple(idx[..., j] for j in range(depth))]
    return Tensor(params.dtype, out)


def one_hot(indices: Tensor, depth: int) -> Tensor:
    idx = indices.data
    if idx.size and (idx.min() < 0 or idx.max() >= depth):
        bad = idx.ravel()[np.argmax((idx.ravel() < 0) | (idx.ravel() >= depth))]
        raise IndexOutOfBounds((int(bad),), (depth,))
    return Tensor(DType.F32, np.eye(depth, dtype=np.float32)[idx])


def bytes_moved(trace: Iterable[Mapping]) -> int:
    """Payload bytes copied by gather ops in an executor trace."""
    return sum(int(r["bytes"]) for r in trace if r.get("kind") in GATHER_KINDS)

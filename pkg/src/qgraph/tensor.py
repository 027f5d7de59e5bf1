"""Dtype-tagged tensors and the scalar quantization maps.

Quantization follows the affine form

    scale = levels / (max - min)
    q     = clamp(round((x - zero_offset) * scale))
    x'    = q / scale + zero_offset

with ``levels`` = 254 for signed (symmetric, [-127, 127]) and 255 for
unsigned ([0, 255]) targets.  ``zero_offset`` lives in value units.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import AsymmetricSignedRange, DegenerateRange, EmptyTensor


class DType(enum.Enum):
    F32 = "F32"
    S8 = "S8"
    U8 = "U8"
    S32 = "S32"

    @property
    def np(self) -> np.dtype:
        return _NP_DTYPES[self]

    @property
    def itemsize(self) -> int:
        return self.np.itemsize

    @property
    def is_integer(self) -> bool:
        return self is not DType.F32

    @property
    def bounds(self) -> tuple[int, int]:
        """Storage range of an integer dtype."""
        info = np.iinfo(self.np)
        return int(info.min), int(info.max)


_NP_DTYPES = {
    DType.F32: np.dtype(np.float32),
    DType.S8: np.dtype(np.int8),
    DType.U8: np.dtype(np.uint8),
    DType.S32: np.dtype(np.int32),
}

# Range quantize() saturates to.  Signed stays symmetric so 0.0 is exact.
QUANT_RANGE = {DType.S8: (-127, 127), DType.U8: (0, 255)}
LEVELS = {DType.S8: 254, DType.U8: 255}


@dataclass(frozen=True, eq=False)
class Tensor:
    """An n-d array tagged with one of the four toolkit dtypes.

    ``data`` is kept as a shaped numpy array; the row-major flat buffer of
    the JSON form is ``data.ravel()``.
    """

    dtype: DType
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if self.dtype.is_integer:
            if arr.size and not np.issubdtype(arr.dtype, np.integer):
                if not np.all(np.equal(np.mod(arr, 1), 0)):
                    raise ValueError(f"non-integral values for {self.dtype.value}")
            if arr.size:
                lo, hi = self.dtype.bounds
                if arr.min() < lo or arr.max() > hi:
                    raise ValueError(f"values outside {self.dtype.value} range [{lo}, {hi}]")
        arr = np.ascontiguousarray(arr, dtype=self.dtype.np)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype is other.dtype
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Tensor({self.dtype.value}, shape={self.shape})"

    @classmethod
    def f32(cls, values) -> "Tensor":
        return cls(DType.F32, np.asarray(values, dtype=np.float32))

    @classmethod
    def s32(cls, values) -> "Tensor":
        return cls(DType.S32, np.asarray(values, dtype=np.int64))

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls(DType.F32, np.float32(value))

    def item(self) -> float:
        return self.data.item()

    def to_json(self) -> dict[str, Any]:
        flat = self.data.ravel()
        if self.dtype is DType.F32:
            # float32 -> float64 is exact and repr() round-trips float64.
            values = [float(v) for v in flat]
        else:
            values = [int(v) for v in flat]
        return {"dtype": self.dtype.value, "shape": list(self.shape), "data": values}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Tensor":
        dtype = DType(obj["dtype"])
        shape = tuple(int(s) for s in obj["shape"])
        data = np.asarray(obj["data"], dtype=np.float64 if dtype is DType.F32 else np.int64)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"data length {data.size} does not match shape {shape}")
        return cls(dtype, data.reshape(shape))


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (exact in binary fp)."""
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    frac = x - whole
    return whole + np.where(np.abs(frac) >= 0.5, np.sign(frac), 0.0)


@dataclass(frozen=True)
class QuantParams:
    min: float
    max: float
    scale: float
    zero_offset: float
    target: DType

    @classmethod
    def accumulator(cls, scale: float) -> "QuantParams":
        """Params describing an S32 accumulator holding ``real * scale``."""
        return cls(-(2.0**31) / scale, 2.0**31 / scale, scale, 0.0, DType.S32)


def compute_scale(min: float, max: float, target: DType) -> QuantParams:
    if target not in LEVELS:
        raise ValueError(f"quantization target must be S8 or U8, got {target}")
    min, max = float(min), float(max)
    if not max > min:
        raise DegenerateRange(f"max ({max}) must exceed min ({min})")
    scale = LEVELS[target] / (max - min)
    if target is DType.S8:
        if min != -max:
            raise AsymmetricSignedRange(f"signed target needs min == -max, got ({min}, {max})")
        return QuantParams(min, max, scale, 0.0, target)
    return QuantParams(min, max, scale, min, target)


def quantize(t: Tensor, p: QuantParams) -> Tensor:
    if t.dtype is not DType.F32:
        raise TypeError(f"quantize expects F32 input, got {t.dtype.value}")
    return _quantize_values(t.data.astype(np.float64), p)


def _quantize_values(x: np.ndarray, p: QuantParams) -> Tensor:
    lo, hi = QUANT_RANGE[p.target]
    q = np.clip(round_half_away((x - p.zero_offset) * p.scale), lo, hi)
    return Tensor(p.target, q.astype(np.int64))


def dequantize(t: Tensor, p: QuantParams) -> Tensor:
    if not t.dtype.is_integer:
        raise TypeError("dequantize expects an integer tensor")
    if t.dtype is not p.target:
        raise TypeError(f"tensor dtype {t.dtype.value} does not match params target {p.target.value}")
    x = t.data.astype(np.float64) / p.scale + p.zero_offset
    return Tensor(DType.F32, x)


def requantize(t: Tensor, in_scale: float, out_min: float, out_max: float) -> tuple[Tensor, QuantParams]:
    """Narrow an S32 accumulator (``real * in_scale``) to U8 over [out_min, out_max]."""
    if t.dtype is not DType.S32:
        raise TypeError("requantize expects an S32 tensor")
    if not in_scale > 0:
        raise ValueError("in_scale must be positive")
    p = compute_scale(out_min, out_max, DType.U8)
    return _quantize_values(t.data.astype(np.float64) / in_scale, p), p


def requantization_range(t: Tensor, in_scale: float) -> tuple[float, float]:
    """Real-valued range of an S32 accumulator, widened to contain 0.

    A tensor of all zeros yields ``(0.0, 0.0)``; callers decide what to do
    with the degenerate range.
    """
    if t.size == 0:
        raise EmptyTensor("requantization_range of an empty tensor")
    lo = min(int(t.data.min()), 0) / in_scale
    hi = max(int(t.data.max()), 0) / in_scale
    return float(lo), float(hi)

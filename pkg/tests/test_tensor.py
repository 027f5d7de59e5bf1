from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import quantize_scalar
from qgraph.errors import AsymmetricSignedRange, DegenerateRange, EmptyTensor
from qgraph.tensor import (
    DType,
    QuantParams,
    Tensor,
    compute_scale,
    dequantize,
    quantize,
    requantization_range,
    requantize,
    round_half_away,
)

U8_UNIT = compute_scale(-1.0, 1.0, DType.U8)
S8_UNIT = compute_scale(-1.0, 1.0, DType.S8)


def q1(x, p):
    return int(quantize(Tensor.f32([x]), p).data[0])


# -- compute_scale ---------------------------------------------------------


def test_scale_u8_unit_range():
    p = compute_scale(-1.0, 1.0, DType.U8)
    assert p.scale == 127.5
    assert p.zero_offset == -1.0


def test_scale_s8_unit_range():
    p = compute_scale(-1.0, 1.0, DType.S8)
    assert p.scale == 127.0
    assert p.zero_offset == 0.0


def test_scale_zero_width_range():
    with pytest.raises(DegenerateRange):
        compute_scale(0.5, 0.5, DType.U8)


def test_scale_signed_needs_symmetric_range():
    with pytest.raises(AsymmetricSignedRange):
        compute_scale(-1.0, 2.0, DType.S8)


def test_scale_rejects_non_8bit_target():
    with pytest.raises(ValueError):
        compute_scale(-1.0, 1.0, DType.S32)


# -- quantize / dequantize -------------------------------------------------


def test_quantize_u8_half():
    want = quantize_scalar(0.5, U8_UNIT.zero_offset, U8_UNIT.scale, 0, 255)
    assert want == 191
    assert q1(0.5, U8_UNIT) == want


def test_quantize_s8_zero():
    assert q1(0.0, S8_UNIT) == 0


def test_quantize_s8_saturates():
    assert q1(5.0, S8_UNIT) == 127
    assert q1(-5.0, S8_UNIT) == -127


def test_dequantize_u8_191():
    want = float(Fraction(191) / Fraction(127.5) - 1)
    got = dequantize(Tensor(DType.U8, [191]), U8_UNIT).data[0]
    assert got == pytest.approx(want, abs=1e-7)
    assert round(float(got), 5) == 0.49804


def test_dequantize_s8_zero_and_endpoint():
    out = dequantize(Tensor(DType.S8, [0, 127]), S8_UNIT).data
    assert out.tolist() == [0.0, 1.0]


def test_dequantize_dtype_must_match_params():
    with pytest.raises(TypeError):
        dequantize(Tensor(DType.S8, [1]), U8_UNIT)


def test_round_half_away_ties():
    got = round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -2.5, 0.49999999999999994]))
    assert got.tolist() == [1.0, 2.0, 3.0, -1.0, -3.0, 0.0]


# -- requantize ------------------------------------------------------------


def test_requantize_mid():
    q, p = requantize(Tensor(DType.S32, [1000]), 1000.0, 0.0, 2.0)
    want = quantize_scalar(1.0, 0.0, 127.5, 0, 255)
    assert want == 128
    assert q.dtype is DType.U8 and int(q.data[0]) == want
    assert p.min == 0.0 and p.max == 2.0


def test_requantize_zero_sits_mid_range():
    q, _ = requantize(Tensor(DType.S32, [0]), 37.0, -1.0, 1.0)
    assert int(q.data[0]) == quantize_scalar(0.0, -1.0, 127.5, 0, 255) == 128


def test_requantize_saturates():
    q, _ = requantize(Tensor(DType.S32, [10**9]), 1.0, 0.0, 2.0)
    assert int(q.data[0]) == 255


def test_requantize_degenerate():
    with pytest.raises(DegenerateRange):
        requantize(Tensor(DType.S32, [1]), 1.0, 1.0, 1.0)


def test_requantization_range_examples():
    assert requantization_range(Tensor(DType.S32, [-5, 10]), 5.0) == (-1.0, 2.0)
    assert requantization_range(Tensor(DType.S32, [3, 7]), 1.0) == (0.0, 7.0)


def test_requantization_range_all_zero_is_degenerate():
    lo, hi = requantization_range(Tensor(DType.S32, [0]), 3.0)
    assert (lo, hi) == (0.0, 0.0)
    with pytest.raises(DegenerateRange):
        compute_scale(lo, hi, DType.U8)


def test_requantization_range_empty():
    with pytest.raises(EmptyTensor):
        requantization_range(Tensor(DType.S32, np.zeros(0, np.int32)), 1.0)


def test_accumulator_params_roundtrip():
    p = QuantParams.accumulator(200.0)
    assert dequantize(Tensor(DType.S32, [400, -200]), p).data.tolist() == [2.0, -1.0]


# -- Tensor ----------------------------------------------------------------


def test_tensor_rejects_out_of_range():
    with pytest.raises(ValueError):
        Tensor(DType.U8, [256])
    with pytest.raises(ValueError):
        Tensor(DType.S8, [-129])
    with pytest.raises(ValueError):
        Tensor(DType.S32, [0.5])


def test_tensor_is_read_only():
    t = Tensor.f32([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 3.0


def test_tensor_equality_is_bitwise():
    assert Tensor.f32([0.0]) != Tensor.f32([-0.0])
    assert Tensor.f32([1.0]) != Tensor(DType.S32, [1])
    assert Tensor.f32([[1.0, 2.0]]) != Tensor.f32([1.0, 2.0])
    assert Tensor.f32([1.5]) == Tensor.f32([1.5])


def test_tensor_json_literal():
    t = Tensor(DType.S8, [[1, -2], [3, 4]])
    assert t.to_json() == {"dtype": "S8", "shape": [2, 2], "data": [1, -2, 3, 4]}
    assert Tensor.from_json(t.to_json()) == t


def test_tensor_json_length_mismatch():
    with pytest.raises(ValueError):
        Tensor.from_json({"dtype": "F32", "shape": [3], "data": [1.0]})


# -- properties ------------------------------------------------------------

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, width=32)


@st.composite
def ranges(draw, target):
    if target is DType.S8:
        t = draw(st.floats(0.0009765625, 1e4, width=32))
        return compute_scale(-t, t, target)
    lo = draw(st.floats(-1e4, 1e4, width=32))
    width = draw(st.floats(0.0009765625, 1e4, width=32))
    hi = float(np.float32(lo + width))
    if not hi > lo:
        hi = float(np.nextafter(np.float32(lo), np.float32(np.inf)))
    return compute_scale(lo, hi, target)


@given(st.sampled_from([DType.S8, DType.U8]).flatmap(lambda d: ranges(d)), st.data())
def test_roundtrip_error_bound(p, data):
    x = data.draw(
        hnp.arrays(np.float64, st.integers(1, 32), elements=st.floats(p.min, p.max, allow_nan=False))
    )
    x = x.astype(np.float32).astype(np.float64)
    x = np.clip(x, p.min, p.max)
    back = dequantize(quantize(Tensor.f32(x), p), p).data.astype(np.float64)
    # float32 output storage adds at most one ulp of the value.
    slack = np.spacing(np.maximum(np.abs(x), np.abs(back)).astype(np.float32)).astype(np.float64)
    assert np.all(np.abs(back - x) <= 0.5 / p.scale + slack)


@given(st.sampled_from([DType.S8, DType.U8]).flatmap(lambda d: ranges(d)), st.lists(finite, min_size=2, max_size=40))
def test_quantize_monotone_and_clamped(p, xs):
    xs = sorted(xs)
    q = quantize(Tensor.f32(xs), p).data.astype(np.int64)
    lo, hi = (-127, 127) if p.target is DType.S8 else (0, 255)
    assert np.all(np.diff(q) >= 0)
    assert q.min() >= lo and q.max() <= hi


@given(st.floats(0.0009765625, 1e4, width=32))
def test_symmetric_zero_is_exact(t):
    p = compute_scale(-t, t, DType.S8)
    assert q1(0.0, p) == 0
    assert dequantize(Tensor(DType.S8, [0]), p).data[0] == 0.0


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5), elements=finite))
def test_quantize_preserves_shape(x):
    t = Tensor.f32(x)
    assert quantize(t, U8_UNIT).shape == t.shape
    assert dequantize(quantize(t, U8_UNIT), U8_UNIT).shape == t.shape


@given(st.sampled_from([DType.S8, DType.U8]).flatmap(lambda d: ranges(d)), finite)
def test_quantize_matches_exact_rational_oracle(p, x):
    lo, hi = (-127, 127) if p.target is DType.S8 else (0, 255)
    exact = quantize_scalar(x, p.zero_offset, p.scale, lo, hi)
    got = q1(x, p)
    # The float64 product can only disagree with exact arithmetic right at a tie.
    if got != exact:
        v = (Fraction(float(np.float32(x))) - Fraction(p.zero_offset)) * Fraction(p.scale)
        assert abs(abs(v - int(v)) - Fraction(1, 2)) < Fraction(1, 10**6)
        assert abs(got - exact) == 1


@given(
    st.sampled_from(list(DType)).flatmap(
        lambda d: hnp.arrays(
            d.np,
            hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
            elements=finite if d is DType.F32 else None,
        ).map(lambda a: Tensor(d, a))
    )
)
def test_tensor_json_roundtrip_bit_exact(t):
    assert Tensor.from_json(t.to_json()) == t

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from npe_sim.fixedpoint import (
    FixedPointError,
    FixedPointFormat,
    FixedWord,
    dequantize,
    dequantize_array,
    fmt,
    fx_arith,
    mul_round_shift,
    quantize,
    quantize_array,
    requantize,
    round_shift,
    saturate,
)

Q1_15 = fmt("Q1.15@16")
Q8_8 = fmt("Q8.8@16")
Q2_30 = fmt("Q2.30@32")
INT16 = FixedPointFormat(16, 0)
FORMATS = [fmt(s) for s in ("Q1.7@8", "Q4.4@8", "Q1.15@16", "Q8.8@16", "Q5.11@16", "Q2.30@32", "Q16.16@32",
                            "Q32.32@64", "Q2.62@64")]


def rne_oracle(num: int, shift: int) -> int:
    """Round num / 2**shift to nearest, ties to even, via exact rationals."""
    q = Fraction(num, 1 << shift) if shift >= 0 else Fraction(num * (1 << -shift))
    fl = math.floor(q)
    rem = q - fl
    if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and fl % 2):
        return fl + 1
    return fl


def sat_oracle(v: int, f: FixedPointFormat) -> int:
    return max(-(1 << (f.total_bits - 1)), min((1 << (f.total_bits - 1)) - 1, v))


class TestFormat:
    def test_parse_roundtrip(self):
        for f in FORMATS:
            assert fmt(str(f)) == f

    @pytest.mark.parametrize("text", ["Q1.15", "Q1.15@12", "Q2.15@16", "1.15@16", "Q16.0@16x"])
    def test_malformed(self, text):
        with pytest.raises(FixedPointError):
            fmt(text)

    def test_frac_bounds(self):
        with pytest.raises(FixedPointError):
            FixedPointFormat(16, 16)
        with pytest.raises(FixedPointError):
            FixedPointFormat(24, 8)
        with pytest.raises(FixedPointError):
            FixedPointFormat(16, 8, signed=False)

    def test_range(self):
        assert Q1_15.min_value == -1.0
        assert Q1_15.max_value == 1 - 2 ** -15
        assert Q8_8.ulp == 2 ** -8

    def test_word_must_fit(self):
        with pytest.raises(FixedPointError):
            FixedWord(1 << 15, Q1_15)
        with pytest.raises(FixedPointError):
            FixedWord(1.5, Q1_15)


class TestQuantize:
    def test_half(self):
        assert quantize(0.5, Q1_15).raw == 0x4000

    def test_saturates(self):
        assert quantize(2.0, Q1_15).raw == 0x7FFF
        assert quantize(-3.0, Q1_15).raw == -0x8000
        assert quantize(math.inf, Q1_15).raw == 0x7FFF

    def test_pi(self):
        w = quantize(math.pi, Q8_8)
        assert abs(dequantize(w) - math.pi) <= 2 ** -9
        # exhaustive oracle: the nearest of all 2**16 codes
        codes = np.arange(-(1 << 15), 1 << 15)
        best = codes[np.argmin(np.abs(codes / 256.0 - math.pi))]
        assert w.raw == best

    def test_nan_rejected(self):
        with pytest.raises(FixedPointError):
            quantize(math.nan, Q1_15)
        with pytest.raises(FixedPointError):
            quantize_array([0.0, math.nan], Q1_15)

    def test_ties_to_even(self):
        assert quantize(0.5 * 2 ** -15, Q1_15).raw == 0
        assert quantize(1.5 * 2 ** -15, Q1_15).raw == 2
        assert quantize(-2.5 * 2 ** -15, Q1_15).raw == -2

    def test_grid_against_oracle(self):
        rng = np.random.default_rng(3)
        for f in FORMATS[:6]:
            vals = rng.uniform(f.min_value * 1.2, f.max_value * 1.2, 500)
            got = quantize_array(vals, f)
            want = [sat_oracle(_rne_real(v, f.frac_bits), f) for v in vals]
            assert got.tolist() == want

    def test_array_matches_scalar_64bit(self):
        f = fmt("Q32.32@64")
        vals = [0.0, 1e-12, -3.25, 2.0 ** 31, -(2.0 ** 40), 123456.789]
        assert quantize_array(vals, f).tolist() == [quantize(v, f).raw for v in vals]

    @given(st.floats(-1.0, 1.0 - 2 ** -15, allow_nan=False))
    def test_roundtrip_bound(self, v):
        assert abs(dequantize(quantize(v, Q1_15)) - v) <= 2 ** -16

    @given(st.floats(-300, 300, allow_nan=False), st.floats(-300, 300, allow_nan=False), st.sampled_from(FORMATS))
    def test_monotone(self, a, b, f):
        lo, hi = min(a, b), max(a, b)
        assert quantize(lo, f).raw <= quantize(hi, f).raw


def _rne_real(v: float, frac: int) -> int:
    q = Fraction(v) * (1 << frac)
    fl = math.floor(q)
    rem = q - fl
    if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and fl % 2):
        return fl + 1
    return fl


class TestRoundShift:
    @given(st.integers(-(1 << 70), 1 << 70), st.integers(-8, 80))
    def test_scalar_oracle(self, x, s):
        assert round_shift(x, s) == rne_oracle(x, s)

    @given(st.lists(st.integers(-(1 << 62), 1 << 62), min_size=1, max_size=20), st.integers(0, 70))
    def test_array_matches_scalar(self, xs, s):
        got = round_shift(np.array(xs, dtype=np.int64), s)
        assert [int(v) for v in got] == [rne_oracle(x, s) for x in xs]

    def test_left_shift_widens(self):
        out = round_shift(np.array([1 << 60], dtype=np.int64), -8)
        assert int(out[0]) == 1 << 68

    def test_mul_round_shift_big(self):
        a = np.array([(1 << 62) - 1, -(1 << 62)], dtype=np.int64)
        got = mul_round_shift(a, (1 << 40) + 3, 50)
        assert [int(v) for v in got] == [rne_oracle(int(x) * ((1 << 40) + 3), 50) for x in a]


class TestArith:
    def test_mul_half(self):
        h = quantize(0.5, Q1_15)
        assert fx_arith("mul", h, h, Q1_15).value == 0.25

    def test_add_saturates(self):
        m = FixedWord(Q1_15.max_raw, Q1_15)
        assert fx_arith("add", m, m, Q1_15).raw == Q1_15.max_raw
        n = FixedWord(Q1_15.min_raw, Q1_15)
        assert fx_arith("sub", n, m, Q1_15).raw == Q1_15.min_raw

    def test_mul_oracle_1000_pairs(self):
        rng = np.random.default_rng(11)
        a = rng.integers(-(1 << 15), 1 << 15, 1000)
        b = rng.integers(-(1 << 15), 1 << 15, 1000)
        for x, y in zip(a.tolist(), b.tolist()):
            got = fx_arith("mul", FixedWord(x, Q1_15), FixedWord(y, Q1_15), Q2_30)
            # Q1.15 x Q1.15 has 30 fraction bits, so the product is exact unless it saturates
            assert got.raw == sat_oracle(x * y, Q2_30)

    @given(st.integers(-(1 << 15), (1 << 15) - 1), st.integers(-(1 << 15), (1 << 15) - 1),
           st.sampled_from(FORMATS[:6]))
    def test_mixed_format_mul(self, x, y, fo):
        got = fx_arith("mul", FixedWord(x, Q1_15), FixedWord(y, Q8_8), fo)
        assert got.raw == sat_oracle(rne_oracle(x * y, 23 - fo.frac_bits), fo)

    @given(st.integers(-(1 << 15), (1 << 15) - 1), st.integers(-(1 << 15), (1 << 15) - 1))
    def test_mixed_add(self, x, y):
        got = fx_arith("add", FixedWord(x, Q1_15), FixedWord(y, Q8_8), Q2_30)
        assert got.raw == sat_oracle((x << 15) + (y << 22), Q2_30)

    def test_shift(self):
        w = quantize(0.75, Q8_8)
        assert fx_arith("shift", w, FixedWord(2, INT16), Q8_8).value == 3.0
        assert fx_arith("shift", w, FixedWord(-1, INT16), Q8_8).value == 0.375
        with pytest.raises(FixedPointError):
            fx_arith("shift", w, FixedWord(64, INT16), Q8_8)

    def test_unknown_op(self):
        with pytest.raises(FixedPointError):
            fx_arith("div", quantize(1, Q8_8), quantize(1, Q8_8), Q8_8)


class TestRequantize:
    def test_narrowing_saturates(self):
        assert requantize(quantize(1.0, Q8_8), Q1_15).raw == Q1_15.max_raw

    @given(st.integers(-(1 << 15), (1 << 15) - 1))
    def test_widen_roundtrip(self, x):
        w = FixedWord(x, Q1_15)
        wide = requantize(w, Q2_30)
        assert wide.value == w.value
        assert requantize(wide, Q1_15) == w

    @given(st.integers(-(1 << 31), (1 << 31) - 1), st.sampled_from(FORMATS[2:5]))
    def test_narrow_oracle(self, x, to):
        got = requantize(FixedWord(x, Q2_30), to)
        assert got.raw == sat_oracle(rne_oracle(x, 30 - to.frac_bits), to)

    @given(st.sampled_from(FORMATS), st.sampled_from(FORMATS), st.data())
    def test_widening_lossless(self, a, b, data):
        if not (b.total_bits >= a.total_bits and b.frac_bits >= a.frac_bits and b.int_bits >= a.int_bits):
            return
        x = data.draw(st.integers(a.min_raw, a.max_raw))
        assert requantize(FixedWord(x, a), b).value == FixedWord(x, a).value

    def test_saturate_array_object(self):
        arr = np.array([1 << 70, -(1 << 70), 5], dtype=object)
        out = saturate(arr, Q1_15)
        assert out.dtype == np.int64 and out.tolist() == [32767, -32768, 5]

    def test_dequantize_object_array(self):
        arr = np.array([1 << 62, -(1 << 62)], dtype=object)
        assert dequantize_array(arr, fmt("Q2.62@64")).tolist() == [1.0, -1.0]

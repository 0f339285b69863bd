"""Parametric two's-complement fixed-point arithmetic.

Every numeric path in the simulator goes through this module.  Values are
held as raw integers together with a :class:`FixedPointFormat`; arithmetic is
exact in a wide intermediate followed by round-to-nearest-even and saturation
into the destination format.  Nothing here wraps on overflow.

Raw payloads may be Python ints or numpy integer arrays.  Array helpers fall
back to ``object`` arrays of Python ints whenever an intermediate could leave
the int64 range, so results never depend on platform integer width.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

VALID_WIDTHS = (8, 16, 32, 64)

_FMT_RE = re.compile(r"^Q(-?\d+)\.(\d+)@(\d+)$")

# int64 products are only trusted below this magnitude
_SAFE = 1 << 62

RawLike = Union[int, np.ndarray]


class FixedPointError(ValueError):
    """Raised for invalid formats or contract violations (e.g. NaN input)."""


@dataclass(frozen=True)
class FixedPointFormat:
    total_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self):
        if self.total_bits not in VALID_WIDTHS:
            raise FixedPointError(f"total_bits must be one of {VALID_WIDTHS}, got {self.total_bits}")
        if not 0 <= self.frac_bits < self.total_bits:
            raise FixedPointError(
                f"frac_bits must satisfy 0 <= frac_bits < total_bits, got {self.frac_bits}"
            )
        if not self.signed:
            raise FixedPointError("only signed formats are supported")

    @property
    def int_bits(self) -> int:
        """Integer bits including the sign bit."""
        return self.total_bits - self.frac_bits

    @property
    def min_raw(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def max_raw(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def ulp(self) -> float:
        return math.ldexp(1.0, -self.frac_bits)

    @property
    def min_value(self) -> float:
        return math.ldexp(self.min_raw, -self.frac_bits)

    @property
    def max_value(self) -> float:
        return math.ldexp(self.max_raw, -self.frac_bits)

    def __str__(self) -> str:
        return f"Q{self.int_bits}.{self.frac_bits}@{self.total_bits}"

    @classmethod
    def parse(cls, text: str) -> "FixedPointFormat":
        """Parse the ``"Qi.f@b"`` descriptor used in config and table files."""
        m = _FMT_RE.match(text.strip())
        if m is None:
            raise FixedPointError(f"malformed format descriptor {text!r} (expected 'Qi.f@b')")
        i, f, b = (int(g) for g in m.groups())
        if i + f != b:
            raise FixedPointError(f"format {text!r}: integer bits + frac bits must equal total bits")
        return cls(total_bits=b, frac_bits=f)


def fmt(text: str) -> FixedPointFormat:
    """Shorthand for :meth:`FixedPointFormat.parse`."""
    return FixedPointFormat.parse(text)


@dataclass(frozen=True)
class FixedWord:
    raw: int
    fmt: FixedPointFormat

    def __post_init__(self):
        if not isinstance(self.raw, (int, np.integer)):
            raise FixedPointError(f"raw payload must be an integer, got {type(self.raw).__name__}")
        object.__setattr__(self, "raw", int(self.raw))
        if not self.fmt.min_raw <= self.raw <= self.fmt.max_raw:
            raise FixedPointError(f"raw {self.raw} does not fit {self.fmt}")

    @property
    def value(self) -> float:
        return math.ldexp(self.raw, -self.fmt.frac_bits)

    def __float__(self) -> float:
        return self.value

    def __repr__(self) -> str:
        return f"FixedWord({self.value!r}, {self.fmt}, raw={self.raw:#x})"


# ---------------------------------------------------------------------------
# raw-level helpers (scalar or array)
# ---------------------------------------------------------------------------


def _is_array(x) -> bool:
    return isinstance(x, np.ndarray)


def _maxabs(x) -> int:
    if _is_array(x):
        if x.size == 0:
            return 0
        return int(max(abs(int(x.max())), abs(int(x.min()))))
    return abs(int(x))


def widen(x):
    """Return ``x`` as an object array of Python ints (arrays only)."""
    if _is_array(x) and x.dtype != object:
        return x.astype(object)
    return x


def narrow(x):
    """Convert an object array back to int64 when every element fits."""
    if _is_array(x) and x.dtype == object:
        if x.size == 0 or _maxabs(x) < (1 << 63):
            return x.astype(np.int64)
    return x


def round_shift(x: RawLike, shift: int) -> RawLike:
    """Compute ``x / 2**shift`` rounded to nearest, ties to even.

    A negative ``shift`` is an exact left shift.  Works on Python ints and on
    integer numpy arrays (int64 or object).
    """
    shift = int(shift)
    if shift <= 0:
        if _is_array(x):
            if _maxabs(x) >= (_SAFE >> -shift):
                x = widen(x)
            return x * (1 << -shift)
        return int(x) << -shift
    if not _is_array(x):
        x = int(x)
        q = x >> shift
        r = x - (q << shift)
        half = 1 << (shift - 1)
        if r > half or (r == half and q & 1):
            q += 1
        return q
    if x.dtype != object and shift >= 63:
        x = widen(x)
    q = x >> shift
    r = x - (q << shift)
    half = 1 << (shift - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + up.astype(q.dtype)


def floor_shift(x: RawLike, shift: int) -> RawLike:
    """Arithmetic shift right (floor) by ``shift``; negative shifts go left."""
    shift = int(shift)
    if shift <= 0:
        return round_shift(x, shift)
    if _is_array(x):
        return x >> shift
    return int(x) >> shift


def saturate(x: RawLike, f: FixedPointFormat) -> RawLike:
    """Clamp raw integers into the representable range of ``f``."""
    if _is_array(x):
        out = np.clip(x, f.min_raw, f.max_raw)
        return narrow(out) if out.dtype == object else out.astype(np.int64)
    return min(max(int(x), f.min_raw), f.max_raw)


def rescale(x: RawLike, from_frac: int, to: FixedPointFormat) -> RawLike:
    """Move raw payload from ``from_frac`` fractional bits into format ``to``."""
    return saturate(round_shift(x, from_frac - to.frac_bits), to)


def _scalar_array(x) -> np.ndarray:
    x = int(x)
    return np.asarray(x, dtype=np.int64 if abs(x) < (1 << 63) else object)


def mul_raw(a: RawLike, b: RawLike) -> RawLike:
    """Exact product of raw payloads, widening to Python ints when needed."""
    if not (_is_array(a) or _is_array(b)):
        return int(a) * int(b)
    a = a if _is_array(a) else _scalar_array(a)
    b = b if _is_array(b) else _scalar_array(b)
    if _maxabs(a) * _maxabs(b) >= _SAFE or a.dtype == object or b.dtype == object:
        return widen(a) * widen(b)
    return a * b


def mul_round_shift(a: RawLike, b: RawLike, shift: int) -> RawLike:
    """``round_nearest_even(a * b / 2**shift)`` without overflow."""
    return narrow(round_shift(mul_raw(a, b), shift))


# ---------------------------------------------------------------------------
# word-level operations
# ---------------------------------------------------------------------------


def quantize(value: float, f: FixedPointFormat) -> FixedWord:
    if isinstance(value, float) and math.isnan(value):
        raise FixedPointError("cannot quantize NaN")
    if math.isinf(value):
        return FixedWord(f.max_raw if value > 0 else f.min_raw, f)
    # scaling by a power of two is exact for binary floats
    raw = round(math.ldexp(float(value), f.frac_bits))
    return FixedWord(saturate(raw, f), f)


def dequantize(w: FixedWord) -> float:
    return w.value


def quantize_array(values, f: FixedPointFormat) -> np.ndarray:
    """Vectorised :func:`quantize` returning raw int64 payloads."""
    v = np.asarray(values, dtype=np.float64)
    if np.isnan(v).any():
        raise FixedPointError("cannot quantize NaN")
    scaled = np.rint(np.ldexp(v, f.frac_bits))
    if f.total_bits < 64:
        return np.clip(scaled, f.min_raw, f.max_raw).astype(np.int64)
    flat = [quantize(float(x), f).raw for x in v.ravel()]
    return narrow(np.array(flat, dtype=object).reshape(v.shape))


def dequantize_array(raw, f: FixedPointFormat) -> np.ndarray:
    r = np.asarray(raw)
    if r.dtype == object:
        return np.array([math.ldexp(int(x), -f.frac_bits) for x in r.ravel()]).reshape(r.shape)
    return np.ldexp(r.astype(np.float64), -f.frac_bits)


def requantize(w: FixedWord, to_fmt: FixedPointFormat) -> FixedWord:
    return FixedWord(rescale(w.raw, w.fmt.frac_bits, to_fmt), to_fmt)


def fx_arith(op: str, a: FixedWord, b: FixedWord, out_fmt: FixedPointFormat) -> FixedWord:
    """Exact ``add``/``sub``/``mul``/``shift`` followed by requantisation.

    For ``shift`` the second operand's raw payload is the shift amount
    (positive shifts left, i.e. multiplies by a power of two).
    """
    if op in ("add", "sub"):
        frac = max(a.fmt.frac_bits, b.fmt.frac_bits)
        x = a.raw << (frac - a.fmt.frac_bits)
        y = b.raw << (frac - b.fmt.frac_bits)
        exact = x + y if op == "add" else x - y
    elif op == "mul":
        frac = a.fmt.frac_bits + b.fmt.frac_bits
        exact = a.raw * b.raw
    elif op == "shift":
        s = b.raw
        if abs(s) >= 64:
            raise FixedPointError(f"shift amount {s} outside word size")
        frac = a.fmt.frac_bits - s
        exact = a.raw
    else:
        raise FixedPointError(f"unknown fixed-point op {op!r}")
    return FixedWord(rescale(exact, frac, out_fmt), out_fmt)

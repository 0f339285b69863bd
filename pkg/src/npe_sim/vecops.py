"""Primitive vector operations shared by the fixed-point kernels and the NVU.

The fixed-point nonlinear kernels are written exclusively in terms of these
functions, and the NVU executes its micro-ops through the same functions, so
the two paths agree bit for bit.  Every call records its operation kind when
an :func:`record_ops` context is active, which makes the "piecewise tables
plus simple vector arithmetic" property checkable.

All operands are raw integer payloads.  ``bits`` is the destination word
width; results saturate into it.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import Counter

import numpy as np

from . import approx
from .fixedpoint import FixedPointFormat, floor_shift, mul_raw, narrow, round_shift, saturate

ALLOWED_KINDS = frozenset(
    {"pwl_eval", "find_segment", "add", "sub", "mul", "shift", "compare", "min", "max", "reduce", "permute"}
)

_recorder: contextvars.ContextVar[Counter | None] = contextvars.ContextVar("npe_op_recorder", default=None)

_INT_FMT = {b: FixedPointFormat(b, 0) for b in (8, 16, 32, 64)}


@contextlib.contextmanager
def record_ops():
    """Collect a ``Counter`` of primitive kinds invoked inside the block."""
    counter: Counter = Counter()
    token = _recorder.set(counter)
    try:
        yield counter
    finally:
        _recorder.reset(token)


def _log(kind: str) -> None:
    c = _recorder.get()
    if c is not None:
        c[kind] += 1


def _sat(x, bits: int):
    return saturate(x, _INT_FMT[bits])


def _arr(x):
    if isinstance(x, np.ndarray):
        return x
    if np.ndim(x):
        return narrow(np.array([int(v) for v in np.ravel(x)], dtype=object).reshape(np.shape(x)))
    return np.asarray(x, dtype=np.int64 if abs(int(x)) < (1 << 63) else object)


def _wide(a, b):
    a, b = _arr(a), _arr(b)
    big = max((int(np.max(np.abs(v))) if v.size else 0) for v in (a, b)) >= 1 << 62
    if big or a.dtype == object or b.dtype == object:
        return a.astype(object), b.astype(object)
    return a, b


def add(a, b, bits: int):
    _log("add")
    a, b = _wide(a, b)
    return _sat(narrow(a + b), bits)


def sub(a, b, bits: int):
    _log("sub")
    a, b = _wide(a, b)
    return _sat(narrow(a - b), bits)


def mul(a, b, shift: int, bits: int):
    """``sat(round(a * b / 2**shift))``; ``b`` may be a scalar (broadcast)."""
    _log("mul")
    return _sat(narrow(round_shift(mul_raw(_arr(a), b), shift)), bits)


def shift(a, right: int, bits: int, mode: str = "rne"):
    """Scale by ``2**-right`` (negative ``right`` shifts left)."""
    _log("shift")
    fn = round_shift if mode == "rne" else floor_shift
    return _sat(narrow(fn(_arr(a), right)), bits)


def vmax(a, b):
    _log("max")
    return np.maximum(_arr(a), _arr(b))


def vmin(a, b):
    _log("min")
    return np.minimum(_arr(a), _arr(b))


def compare_ge(a, b):
    _log("compare")
    return _arr(a) >= _arr(b)


def reduce_sum(a, bits: int) -> int:
    """Exact sum of all lanes, saturated once into ``bits``."""
    _log("reduce")
    a = _arr(a)
    # an int64 sum is exact while size * max|a| stays below 2**63
    small = a.dtype != object and a.size <= 1 << 20 and (not a.size or int(np.max(np.abs(a))) < 1 << 42)
    total = int(a.sum(dtype=np.int64)) if small else int(a.astype(object).sum())
    return int(_sat(total, bits))


def reduce_max(a) -> int:
    _log("reduce")
    return int(np.max(_arr(a)))


def permute(a, index):
    _log("permute")
    return _arr(a)[np.asarray(index)]


def pwl(x, table: "approx.PwlTable"):
    _log("pwl_eval")
    return approx.eval_raw(table, _arr(x))


def leading_one(x, max_bits: int = 64):
    """Index of the most significant set bit of positive ``x``.

    Realised as a segment search over the power-of-two knots, i.e. the same
    priority encoder used for table lookup.
    """
    _log("find_segment")
    knots = _POW2_KNOTS[max_bits]
    if np.ndim(x):
        return approx.find_segment_raw(_arr(x), knots)
    return int(approx.find_segment_raw(_arr(x).reshape(1), knots)[0])


# knots 2**0 .. 2**(b-2) followed by the largest positive b-bit value
_POW2_KNOTS = {
    b: np.array([1 << k for k in range(b - 1)] + [(1 << (b - 1)) - 1], dtype=np.int64) for b in (16, 32, 64)
}

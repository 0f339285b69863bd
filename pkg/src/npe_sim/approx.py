"""Non-uniform continuous piecewise-linear (and piecewise-quadratic) tables.

A :class:`PwlTable` stores knot samples and nodal values as raw fixed-point
payloads.  Evaluation is integer-only:

1. segment address by priority search over the knots (largest ``i`` with
   ``knots[i] <= x``),
2. fractional distance ``delta = (x - x_i) * recip_width_i`` where the
   reciprocal segment width is precomputed with :func:`recip_frac` bits, and
3. interpolation ``v_i + delta * (v_{i+1} - v_i)``, which is the same
   integer as ``(1 - delta) * v_i + delta * v_{i+1}`` after rounding.

Segmentation is greedy max-error bisection followed by one pass of local knot
adjustment.  Tables are immutable and safe to share.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .fixedpoint import (
    FixedPointError,
    FixedPointFormat,
    FixedWord,
    dequantize_array,
    mul_raw,
    narrow,
    quantize_array,
    round_shift,
    saturate,
)

RECIP_FRAC = 30
RANGE_POLICIES = ("clamp", "extrapolate_last_segment")
TABLE_FILE_KIND = "npe-pwl-table"
# exhaustive grids are used up to this many input codes
_EXHAUSTIVE_LIMIT = 1 << 17


class SegmentationError(RuntimeError):
    def __init__(self, message: str, achieved_error: float, segments: int):
        super().__init__(message)
        self.achieved_error = achieved_error
        self.segments = segments


class TableFormatError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.int64)
    arr.setflags(write=False)
    return arr


def recip_frac(input_fmt: FixedPointFormat) -> int:
    """Fraction bits of the stored reciprocal widths.

    Wider inputs have proportionally wider segments in raw units, so the
    reciprocal gains one bit per extra input bit to keep its precision.
    """
    return RECIP_FRAC + max(0, input_fmt.total_bits - 16)


def recip_widths(knots, frac: int = RECIP_FRAC) -> np.ndarray:
    """Per-segment ``round(2**frac / width)`` for raw knot positions."""
    return np.array([_recip(int(w), frac) for w in np.diff(np.asarray(knots, dtype=np.int64))], dtype=np.int64)


def _recip(width: int, frac: int) -> int:
    # round(2**frac / width), ties to even
    q, r = divmod(1 << frac, width)
    if 2 * r > width or (2 * r == width and q & 1):
        q += 1
    return q


@dataclass(frozen=True, eq=False)
class PwlTable:
    knots: np.ndarray
    values: np.ndarray
    input_fmt: FixedPointFormat
    output_fmt: FixedPointFormat
    degree: int = 1
    range_policy: str = "clamp"
    prescale: int = 0
    postscale: int = 0
    recip_width: Optional[np.ndarray] = None
    quad: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        knots = _frozen(self.knots)
        values = _frozen(self.values)
        if knots.ndim != 1 or len(knots) < 2:
            raise TableFormatError("knots_raw", "need at least two knots")
        if len(values) != len(knots):
            raise TableFormatError(
                "values_raw", f"length {len(values)} does not match {len(knots)} knots"
            )
        if np.any(np.diff(knots) <= 0):
            bad = int(np.argmax(np.diff(knots) <= 0)) + 1
            raise TableFormatError("knots_raw", f"knots not strictly increasing at index {bad}")
        for name, arr, f in (("knots_raw", knots, self.input_fmt), ("values_raw", values, self.output_fmt)):
            if arr.min() < f.min_raw or arr.max() > f.max_raw:
                raise TableFormatError(name, f"payload outside {f}")
        if self.degree not in (1, 2):
            raise TableFormatError("degree", f"must be 1 or 2, got {self.degree}")
        if self.range_policy not in RANGE_POLICIES:
            raise TableFormatError("range_policy", f"must be one of {RANGE_POLICIES}")
        rw = self.recip_width
        rw = _frozen(recip_widths(knots, recip_frac(self.input_fmt))) if rw is None else _frozen(rw)
        if len(rw) != len(knots) - 1:
            raise TableFormatError("recip_width_raw", "need one entry per segment")
        quad = self.quad
        if self.degree == 2:
            if quad is None or len(quad) != len(knots) - 1:
                raise TableFormatError("quad_raw", "degree-2 tables need one coefficient per segment")
            quad = _frozen(quad)
        elif quad is not None:
            raise TableFormatError("quad_raw", "only valid for degree-2 tables")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "recip_width", rw)
        object.__setattr__(self, "quad", quad)

    @property
    def recip_frac(self) -> int:
        return recip_frac(self.input_fmt)

    @property
    def segments(self) -> int:
        return len(self.knots) - 1

    @property
    def knot_words(self) -> list[FixedWord]:
        return [FixedWord(int(k), self.input_fmt) for k in self.knots]

    @property
    def nodal_words(self) -> list[FixedWord]:
        return [FixedWord(int(v), self.output_fmt) for v in self.values]

    def knot_values(self) -> np.ndarray:
        return dequantize_array(self.knots, self.input_fmt)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PwlTable):
            return NotImplemented
        same = lambda a, b: (a is None and b is None) or (
            a is not None and b is not None and np.array_equal(a, b)
        )
        return (
            self.input_fmt == other.input_fmt
            and self.output_fmt == other.output_fmt
            and self.degree == other.degree
            and self.range_policy == other.range_policy
            and self.prescale == other.prescale
            and self.postscale == other.postscale
            and self.name == other.name
            and np.array_equal(self.knots, other.knots)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.recip_width, other.recip_width)
            and same(self.quad, other.quad)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ErrorReport:
    max_abs_error: float
    max_rel_error: float
    argmax_point: float
    grid_points: int


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def find_segment_raw(x, knots: np.ndarray):
    """Segment index for raw input(s): largest ``i`` with ``knots[i] <= x``.

    Inputs below the first knot map to segment 0 and inputs at or beyond the
    last knot map to the last segment.
    """
    knots = np.asarray(knots)
    n_seg = len(knots) - 1
    idx = np.searchsorted(knots, np.asarray(x, dtype=np.int64) if not _is_obj(x) else x, side="right") - 1
    return np.clip(idx, 0, n_seg - 1)


def _is_obj(x) -> bool:
    return isinstance(x, np.ndarray) and x.dtype == object


def find_segment(x: FixedWord, table: PwlTable) -> int:
    if x.fmt != table.input_fmt:
        raise FixedPointError(f"input format {x.fmt} does not match table input {table.input_fmt}")
    return int(find_segment_raw(np.array([x.raw]), table.knots)[0])


def eval_raw(table: PwlTable, x) -> np.ndarray:
    """Evaluate ``table`` on raw input payload(s); returns raw output payloads."""
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x))
    if x.dtype != object:
        x = x.astype(np.int64)
    if table.prescale:
        x = saturate(round_shift(x, -table.prescale), table.input_fmt)
    knots, values = table.knots, table.values
    idx = find_segment_raw(x, knots)
    xc = np.clip(x, knots[0], knots[-1]) if table.range_policy == "clamp" else x
    x_lo = knots[idx]
    v_lo = values[idx]
    v_hi = values[idx + 1]
    delta = mul_raw(xc - x_lo, table.recip_width[idx])
    dv = v_hi - v_lo
    rf = table.recip_frac
    if table.degree == 1:
        y = v_lo + round_shift(mul_raw(delta, dv), rf)
    else:
        d = delta.astype(object) if delta.dtype != object else delta
        inner = dv.astype(object) * (1 << rf) + table.quad[idx].astype(object) * (d - (1 << rf))
        y = v_lo.astype(object) + round_shift(d * inner, 2 * rf)
    y = narrow(y)
    # a knot hit returns its nodal value exactly, including the last knot
    y = np.where(xc == knots[idx + 1], v_hi, y)
    if table.postscale:
        y = round_shift(y, -table.postscale)
    y = saturate(y, table.output_fmt)
    return y[0] if scalar else y


def eval_cpwl(x: FixedWord, table: PwlTable) -> FixedWord:
    if x.fmt != table.input_fmt:
        raise FixedPointError(f"input format {x.fmt} does not match table input {table.input_fmt}")
    return FixedWord(int(eval_raw(table, x.raw)), table.output_fmt)


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------


def _grid(table: PwlTable, grid_points: int) -> np.ndarray:
    lo, hi = int(table.knots[0]), int(table.knots[-1])
    if hi - lo + 1 <= grid_points:
        g = np.arange(lo, hi + 1, dtype=np.int64)
    else:
        g = np.unique(np.rint(np.linspace(lo, hi, grid_points)).astype(np.int64))
    return np.union1d(g, table.knots)


def certify_error(table: PwlTable, f: Callable[[np.ndarray], np.ndarray], grid_points: int = 65537) -> ErrorReport:
    """Max error of the fixed-point evaluation against ``f`` on a dense grid plus all knots."""
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    g = _grid(table, grid_points)
    x = dequantize_array(g, table.input_fmt)
    y = dequantize_array(eval_raw(table, g), table.output_fmt)
    ref = np.asarray(f(x), dtype=np.float64)
    err = np.abs(y - ref)
    k = int(np.argmax(err))
    rel = err / np.maximum(np.abs(ref), table.output_fmt.ulp)
    return ErrorReport(
        max_abs_error=float(err[k]),
        max_rel_error=float(rel.max()),
        argmax_point=float(x[k]),
        grid_points=int(len(g)),
    )


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


class _Segmenter:
    """Float-domain error model used while searching for knots."""

    def __init__(self, f, grid_raw: np.ndarray, input_fmt, output_fmt, degree: int):
        self.f = f
        self.grid = grid_raw
        self.input_fmt = input_fmt
        self.output_fmt = output_fmt
        self.degree = degree
        self.xs = dequantize_array(grid_raw, input_fmt)
        self.fx = np.asarray(f(self.xs), dtype=np.float64)

    def nodal(self, k_raw: int) -> float:
        x = math.ldexp(k_raw, -self.input_fmt.frac_bits)
        v = float(np.asarray(self.f(np.array([x])), dtype=np.float64)[0])
        return float(dequantize_array(quantize_array([v], self.output_fmt), self.output_fmt)[0])

    def seg_error(self, a: int, b: int) -> tuple[float, int]:
        """(max error, raw argmax) of the interpolant on [a, b]."""
        lo = np.searchsorted(self.grid, a, side="left")
        hi = np.searchsorted(self.grid, b, side="right")
        if hi - lo <= 2:
            return 0.0, a
        xs = self.xs[lo:hi]
        fx = self.fx[lo:hi]
        va, vb = self.nodal(a), self.nodal(b)
        xa = math.ldexp(a, -self.input_fmt.frac_bits)
        xb = math.ldexp(b, -self.input_fmt.frac_bits)
        d = (xs - xa) / (xb - xa)
        approx = va + d * (vb - va)
        if self.degree == 2:
            c = _quad_coef(va, vb, self._mid_value(a, b))
            approx = approx + c * d * (d - 1.0)
        err = np.abs(approx - fx)
        k = int(np.argmax(err))
        return float(err[k]), int(self.grid[lo + k])

    def _mid_value(self, a: int, b: int) -> float:
        xm = math.ldexp((a + b) / 2.0, -self.input_fmt.frac_bits)
        return float(np.asarray(self.f(np.array([xm])), dtype=np.float64)[0])


def _quad_coef(va: float, vb: float, vmid: float) -> float:
    # y = va + d*(vb - va) + c*d*(d - 1) passes through vmid at d = 1/2
    return 4.0 * (0.5 * (va + vb) - vmid)


def _search_grid(lo: int, hi: int, grid_points: Optional[int]) -> np.ndarray:
    n = grid_points or _EXHAUSTIVE_LIMIT
    if hi - lo + 1 <= n:
        return np.arange(lo, hi + 1, dtype=np.int64)
    return np.unique(np.rint(np.linspace(lo, hi, n)).astype(np.int64))


def _interval_raw(interval: Sequence[float], input_fmt: FixedPointFormat) -> tuple[int, int]:
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise ValueError(f"interval must satisfy lo < hi, got [{lo}, {hi}]")
    lo_raw, hi_raw = (int(v) for v in quantize_array([lo, hi], input_fmt))
    if hi_raw <= lo_raw:
        raise ValueError(f"interval [{lo}, {hi}] collapses in {input_fmt}")
    return lo_raw, hi_raw


def segment_function(
    f: Callable[[np.ndarray], np.ndarray],
    interval: Sequence[float],
    *,
    max_segments: Optional[int] = None,
    target_max_error: Optional[float] = None,
    input_fmt: FixedPointFormat,
    output_fmt: FixedPointFormat,
    degree: int = 1,
    range_policy: str = "clamp",
    segment_cap: int = 256,
    grid_points: Optional[int] = None,
    adjust: bool = True,
    pinned: Sequence[float] = (),
    name: str = "",
) -> PwlTable:
    """Build a non-uniform continuous piecewise table for ``f`` on ``interval``.

    Exactly one of ``max_segments`` / ``target_max_error`` must be given.  With
    a target, segments are added until the model error meets it; reaching
    ``segment_cap`` first raises :class:`SegmentationError`.  ``pinned`` knots
    (inside the interval) are always present and never moved; they count
    against the segment budget.
    """
    if (max_segments is None) == (target_max_error is None):
        raise ValueError("give exactly one of max_segments or target_max_error")
    if max_segments is not None and max_segments < 1:
        raise ValueError("max_segments must be positive")
    if target_max_error is not None and target_max_error <= 0:
        raise ValueError("target_max_error must be positive")
    lo, hi = _interval_raw(interval, input_fmt)
    seg = _Segmenter(f, _search_grid(lo, hi, grid_points), input_fmt, output_fmt, degree)
    if not np.all(np.isfinite(seg.fx)):
        raise ValueError("function is not finite on the interval")

    fixed = {lo, hi}
    if len(pinned):
        for p in quantize_array(list(pinned), input_fmt).tolist():
            if not lo < p < hi:
                raise ValueError(f"pinned knot {p * input_fmt.ulp} is not inside the interval")
            fixed.add(int(p))
    knots = sorted(fixed)
    if max_segments is not None and len(knots) - 1 > max_segments:
        raise ValueError(f"{len(knots) - 1} segments are needed for the pinned knots, budget is {max_segments}")
    errs = [seg.seg_error(a, b) for a, b in zip(knots[:-1], knots[1:])]
    limit = max_segments if max_segments is not None else segment_cap
    while len(knots) - 1 < limit:
        if target_max_error is not None and max(e for e, _ in errs) <= target_max_error:
            break
        # worst splittable segment; lowest index wins ties
        order = sorted(range(len(errs)), key=lambda i: (-errs[i][0], i))
        pick = next(
            (i for i in order if errs[i][0] > 0 and knots[i] < errs[i][1] < knots[i + 1]),
            None,
        )
        if pick is None:
            break
        split = errs[pick][1]
        knots.insert(pick + 1, split)
        errs[pick:pick + 1] = [seg.seg_error(knots[pick], split), seg.seg_error(split, knots[pick + 2])]

    if adjust:
        knots, errs = _adjust_knots(seg, knots, errs, fixed)

    achieved = max(e for e, _ in errs)
    if target_max_error is not None and achieved > target_max_error:
        raise SegmentationError(
            f"target error {target_max_error:g} unreachable within {segment_cap} segments "
            f"(achieved {achieved:g})",
            achieved_error=achieved,
            segments=len(knots) - 1,
        )
    return _table_from_knots(seg, knots, range_policy, name)


def _adjust_knots(seg: _Segmenter, knots: list[int], errs: list[tuple[float, int]], fixed=frozenset()):
    knots = list(knots)
    errs = list(errs)
    for i in range(1, len(knots) - 1):
        if knots[i] in fixed:
            continue
        left, right = knots[i - 1], knots[i + 1]
        best = max(errs[i - 1][0], errs[i][0])
        step = max((right - left) // 4, 1)
        while step >= 1:
            moved = False
            for cand in (knots[i] - step, knots[i] + step):
                if not left < cand < right:
                    continue
                el, er = seg.seg_error(left, cand), seg.seg_error(cand, right)
                if max(el[0], er[0]) < best:
                    best = max(el[0], er[0])
                    knots[i] = cand
                    errs[i - 1], errs[i] = el, er
                    moved = True
                    break
            if not moved:
                step //= 2
    return knots, errs


def _table_from_knots(seg: _Segmenter, knots: list[int], range_policy: str, name: str) -> PwlTable:
    knots_arr = np.array(knots, dtype=np.int64)
    xs = dequantize_array(knots_arr, seg.input_fmt)
    values = quantize_array(np.asarray(seg.f(xs), dtype=np.float64), seg.output_fmt)
    quad = None
    if seg.degree == 2:
        va = dequantize_array(values, seg.output_fmt)
        mids = np.array([seg._mid_value(a, b) for a, b in zip(knots[:-1], knots[1:])])
        c = _quad_coef(va[:-1], va[1:], mids)
        quad = quantize_array(c, seg.output_fmt)
    return PwlTable(
        knots=knots_arr,
        values=values,
        input_fmt=seg.input_fmt,
        output_fmt=seg.output_fmt,
        degree=seg.degree,
        range_policy=range_policy,
        quad=quad,
        name=name,
    )


def uniform_table(
    f: Callable[[np.ndarray], np.ndarray],
    interval: Sequence[float],
    segments: int,
    *,
    input_fmt: FixedPointFormat,
    output_fmt: FixedPointFormat,
    range_policy: str = "clamp",
    name: str = "",
) -> PwlTable:
    """Uniform-width interpolating table, used as the baseline for comparisons."""
    lo, hi = _interval_raw(interval, input_fmt)
    knots = np.unique(np.rint(np.linspace(lo, hi, segments + 1)).astype(np.int64))
    seg = _Segmenter(f, knots, input_fmt, output_fmt, 1)
    return _table_from_knots(seg, [int(k) for k in knots], range_policy, name)


# ---------------------------------------------------------------------------
# table files
# ---------------------------------------------------------------------------


def table_to_dict(table: PwlTable) -> dict:
    d = {
        "kind": TABLE_FILE_KIND,
        "version": 1,
        "name": table.name,
        "degree": table.degree,
        "input_fmt": str(table.input_fmt),
        "output_fmt": str(table.output_fmt),
        "range_policy": table.range_policy,
        "prescale": table.prescale,
        "postscale": table.postscale,
        "knots_raw": [int(k) for k in table.knots],
        "values_raw": [int(v) for v in table.values],
        "recip_width_raw": [int(r) for r in table.recip_width],
    }
    if table.quad is not None:
        d["quad_raw"] = [int(c) for c in table.quad]
    return d


def _int_list(d: dict, key: str, required: bool = True) -> Optional[list[int]]:
    if key not in d:
        if required:
            raise TableFormatError(key, "missing field")
        return None
    val = d[key]
    if not isinstance(val, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in val):
        raise TableFormatError(key, "must be a list of integers")
    return val


def table_from_dict(d: dict) -> PwlTable:
    if not isinstance(d, dict):
        raise TableFormatError("<root>", "table file must hold an object")
    if d.get("kind", TABLE_FILE_KIND) != TABLE_FILE_KIND:
        raise TableFormatError("kind", f"expected {TABLE_FILE_KIND!r}")
    try:
        in_fmt = FixedPointFormat.parse(d["input_fmt"])
    except (KeyError, FixedPointError, AttributeError) as exc:
        raise TableFormatError("input_fmt", str(exc)) from None
    try:
        out_fmt = FixedPointFormat.parse(d["output_fmt"])
    except (KeyError, FixedPointError, AttributeError) as exc:
        raise TableFormatError("output_fmt", str(exc)) from None
    for key in ("degree", "prescale", "postscale"):
        if key in d and (not isinstance(d[key], int) or isinstance(d[key], bool)):
            raise TableFormatError(key, "must be an integer")
    return PwlTable(
        knots=_int_list(d, "knots_raw"),
        values=_int_list(d, "values_raw"),
        input_fmt=in_fmt,
        output_fmt=out_fmt,
        degree=d.get("degree", 1),
        range_policy=d.get("range_policy", "clamp"),
        prescale=d.get("prescale", 0),
        postscale=d.get("postscale", 0),
        recip_width=_int_list(d, "recip_width_raw", required=False),
        quad=_int_list(d, "quad_raw", required=False),
        name=d.get("name", ""),
    )


def dumps_table(table: PwlTable) -> str:
    return json.dumps(table_to_dict(table), indent=1) + "\n"


def loads_table(text: str) -> PwlTable:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TableFormatError("<root>", f"malformed JSON: {exc}") from None
    return table_from_dict(d)


def write_table(table: PwlTable, path) -> Path:
    path = Path(path)
    path.write_text(dumps_table(table))
    return path


def read_table(path) -> PwlTable:
    return loads_table(Path(path).read_text())

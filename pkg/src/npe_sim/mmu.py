"""Matrix multiply unit: numerics, cycle count and the 8-bit packing audit.

Products are exact, accumulation is exact and the 32-bit accumulator
saturates once at the end of the reduction, then the result is requantized
(round to nearest even, saturate) into the 16-bit output format.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .fixedpoint import FixedPointFormat, fmt, round_shift, saturate
from .workload import matmul_cycles

PRECISIONS = ("int8", "int16")
ACC_FMT = FixedPointFormat(32, 0)


class MmuError(ValueError):
    pass


@dataclass(frozen=True)
class MmuConfig:
    pe_count: int = 128
    macs_per_pe: int = 16
    precision: str = "int16"
    output_fmt: FixedPointFormat = fmt("Q5.11@16")

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise MmuError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.pe_count < 1 or self.macs_per_pe < 1:
            raise MmuError("pe_count and macs_per_pe must be positive")
        if self.output_fmt.total_bits != 16:
            raise MmuError("MMU output format must be 16-bit")

    @property
    def operand_bits(self) -> int:
        return 8 if self.precision == "int8" else 16

    @property
    def mults_per_cycle(self) -> int:
        return self.pe_count * self.macs_per_pe * (2 if self.precision == "int8" else 1)


def _operand(x, bits: int, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.int64)
    if a.ndim != 2:
        raise MmuError(f"{name} must be a matrix")
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if a.size and (a.min() < lo or a.max() > hi):
        raise MmuError(f"{name} holds values outside the {bits}-bit operand range")
    return a


def accumulate(a_raw, b_raw, cfg: MmuConfig, bias_acc=None) -> np.ndarray:
    """Exact integer ``A @ B`` (+ bias at accumulator scale) before saturation."""
    a = _operand(a_raw, cfg.operand_bits, "A")
    b = _operand(b_raw, cfg.operand_bits, "B")
    if a.shape[1] != b.shape[0]:
        raise MmuError(f"inner dimensions differ: {a.shape} x {b.shape}")
    # |product| < 2**30 and K <= 2**20 keeps int64 exact
    if a.shape[1] > 1 << 20:
        raise MmuError("inner dimension too large for exact int64 accumulation")
    bits = cfg.operand_bits
    if a.shape[1] << (2 * bits - 2) < 1 << 53:
        # every partial sum is an integer below 2**53, so float64 BLAS is exact
        acc = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    else:
        acc = a @ b
    if bias_acc is not None:
        acc = acc + np.asarray(bias_acc, dtype=np.int64)
    return acc


def mmu_matmul(a_raw, b_raw, cfg: MmuConfig, a_frac: int, b_frac: int,
               out_fmt: Optional[FixedPointFormat] = None, bias_acc=None) -> tuple[np.ndarray, int]:
    """Return ``(C_raw, cycles)``; ``C`` is in ``out_fmt`` (default ``cfg.output_fmt``).

    ``bias_acc`` is an optional bias row already scaled to the accumulator
    (``a_frac + b_frac`` fraction bits); it initialises the accumulator.
    """
    out_fmt = out_fmt or cfg.output_fmt
    acc = saturate(accumulate(a_raw, b_raw, cfg, bias_acc), ACC_FMT)
    c = saturate(round_shift(acc, a_frac + b_frac - out_fmt.frac_bits), out_fmt)
    n, k = np.shape(a_raw)
    m = np.shape(b_raw)[1]
    return np.asarray(c, dtype=np.int64), matmul_cycles(n, m, k, cfg.mults_per_cycle)


# ---------------------------------------------------------------------------
# 8-bit operand-sharing audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    tile: int
    first: tuple  # (n, k, m) of the first product
    second: tuple

    def __str__(self) -> str:
        return f"tile {self.tile} pairs products {self.first} and {self.second} with no common operand"


def default_tiling(n: int, m: int, k: int) -> np.ndarray:
    """Pairs of products ``(n, k, m)`` sharing a DSP slot in 8-bit mode.

    Each A element ``A[n, k]`` is multiplied by two adjacent B columns
    ``m`` and ``m+1``.  With an odd column count the last column is paired
    across two rows instead, sharing ``B[k, m]``.  A single leftover product
    runs alone (its partner lane idles).  Returns an array of shape
    ``(pairs, 2, 3)``; an unpaired product has its second entry set to -1.
    """
    nn, kk, mm = np.meshgrid(np.arange(n), np.arange(k), np.arange(m - m % 2, step=2), indexing="ij")
    a = np.stack([nn.ravel(), kk.ravel(), mm.ravel()], axis=1)
    pairs = [np.stack([a, a + np.array([0, 0, 1])], axis=1)]
    if m % 2:
        rows = np.arange(n - n % 2, step=2)
        r, kq = np.meshgrid(rows, np.arange(k), indexing="ij")
        first = np.stack([r.ravel(), kq.ravel(), np.full(r.size, m - 1)], axis=1)
        pairs.append(np.stack([first, first + np.array([1, 0, 0])], axis=1))
        if n % 2:
            single = np.stack([np.full(k, n - 1), np.arange(k), np.full(k, m - 1)], axis=1)
            pairs.append(np.stack([single, np.full_like(single, -1)], axis=1))
    return np.concatenate(pairs).reshape(-1, 2, 3) if pairs else np.zeros((0, 2, 3), dtype=np.int64)


def shared_input_constraint_check(a_raw, b_raw, cfg: MmuConfig,
                                  tiling: Optional[Iterable] = None) -> Optional[Violation]:
    """Return ``None`` if every DSP slot pairs products with a common operand.

    Also checks that the tiling covers every product of the matmul exactly
    once; a coverage error is reported as a :class:`MmuError`.
    """
    if cfg.precision != "int8":
        raise MmuError("the operand-sharing constraint applies to int8 mode only")
    a = np.asarray(a_raw)
    b = np.asarray(b_raw)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise MmuError("dimension mismatch")
    n, k = a.shape
    m = b.shape[1]
    t = default_tiling(n, m, k) if tiling is None else np.asarray(list(tiling), dtype=np.int64).reshape(-1, 2, 3)

    p, q = t[:, 0, :], t[:, 1, :]
    paired = q[:, 0] >= 0
    share_a = (p[:, 0] == q[:, 0]) & (p[:, 1] == q[:, 1])
    share_b = (p[:, 1] == q[:, 1]) & (p[:, 2] == q[:, 2])
    bad = np.nonzero(paired & ~(share_a | share_b))[0]

    flat = np.concatenate([p, q[paired]])
    code = (flat[:, 0] * k + flat[:, 1]) * m + flat[:, 2]
    if ((flat < 0) | (flat >= np.array([n, k, m]))).any():
        raise MmuError("tiling references a product outside the matmul")
    if code.size != n * m * k or np.unique(code).size != code.size:
        raise MmuError("tiling does not cover every product exactly once")
    if bad.size:
        i = int(bad[0])
        return Violation(i, tuple(int(v) for v in p[i]), tuple(int(v) for v in q[i]))
    return None

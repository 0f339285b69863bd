"""Softmax, layer normalisation and GELU in reference and fixed-point form.

The fixed-point kernels (``*_fixed``) operate on raw payloads and use only the
primitives in :mod:`npe_sim.vecops`: table evaluation, add/sub/mul/shift,
compare/min/max, and reductions.  Division, exponentials and square roots
appear only while *building* tables, never while evaluating a kernel.

The public ``*_row`` / :func:`gelu` wrappers take and return real vectors and
select the path with ``mode="reference"`` or ``mode="fixed_point"``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.special import erf

from . import vecops as vo
from .approx import PwlTable, segment_function
from .fixedpoint import FixedPointFormat, dequantize_array, fmt, quantize_array

MODES = ("reference", "fixed_point")

# layer-norm internal precisions: centred values in Q16.16, variance in
# Q32.32, normalised values in Q8.24, 1/K in 64-bit with 62 fraction bits
LN_D_FRAC = 16
LN_XHAT_FRAC = 24
INV_K_FRAC = 62
RSQRT_OUT_FRAC = 30
RECIP_OUT_FRAC = 30


@dataclass(frozen=True)
class TableBudgets:
    exp: int = 32
    recip: int = 64
    rsqrt: int = 16
    gelu: int = 16


@dataclass(frozen=True)
class NonlinearConfig:
    """Fixed-point formats and table budgets for the three kernels."""

    softmax_in: FixedPointFormat = fmt("Q6.10@16")
    softmax_out: FixedPointFormat = fmt("Q1.15@16")
    exp_out: FixedPointFormat = fmt("Q1.15@16")
    exp_domain: tuple[float, float] = (-16.0, 0.0)
    ln_in: FixedPointFormat = fmt("Q6.10@16")
    ln_out: FixedPointFormat = fmt("Q4.12@16")
    ln_gamma: FixedPointFormat = fmt("Q4.12@16")
    ln_eps: float = 2.0 ** -20
    gelu_io: FixedPointFormat = fmt("Q5.11@16")
    gelu_domain: tuple[float, float] = (-8.0, 8.0)
    budgets: TableBudgets = field(default_factory=TableBudgets)

    def __post_init__(self):
        if self.ln_in.frac_bits > LN_D_FRAC:
            raise ValueError(f"layer-norm input may carry at most {LN_D_FRAC} fraction bits")
        if self.ln_eps <= 0:
            raise ValueError("epsilon must be positive")


DEFAULT_CONFIG = NonlinearConfig()


@dataclass(frozen=True)
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 2.0 ** -20

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if g.shape != b.shape or g.ndim != 1:
            raise ValueError("gamma and beta must be vectors of equal length")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)

    @classmethod
    def identity(cls, k: int, epsilon: float = 2.0 ** -20) -> "LayerNormParams":
        return cls(np.ones(k), np.zeros(k), epsilon)


@dataclass(frozen=True)
class AttentionScale:
    k: float = 8.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("attention scale k must be positive")


# ---------------------------------------------------------------------------
# reference functions
# ---------------------------------------------------------------------------


def gelu_exact(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_tanh(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def softmax_reference(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layernorm_reference(x, gamma, beta, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelTables:
    exp: PwlTable
    recip: PwlTable
    rsqrt: PwlTable
    gelu: PwlTable

    def as_dict(self) -> dict[str, PwlTable]:
        return {"exp": self.exp, "recip": self.recip, "rsqrt": self.rsqrt, "gelu": self.gelu}


# GELU(0) = 0 exactly, and past +-4 GELU sits within half an output ULP of
# its asymptotes (x and 0), so the outer segments are exact lines and
# extrapolation beyond the domain continues them
GELU_PINNED_KNOTS = (-4.0, 0.0, 4.0)

# normalised operand formats of the scalar tables
RECIP_IN = fmt("Q2.30@32")
RSQRT_IN = fmt("Q3.13@16")


@functools.lru_cache(maxsize=16)
def build_tables(cfg: NonlinearConfig = DEFAULT_CONFIG) -> KernelTables:
    b = cfg.budgets
    return KernelTables(
        exp=segment_function(
            np.exp, cfg.exp_domain, max_segments=b.exp,
            input_fmt=cfg.softmax_in, output_fmt=cfg.exp_out, name="exp",
        ),
        recip=segment_function(
            lambda x: 1.0 / x, (1.0, 2.0), max_segments=b.recip,
            input_fmt=RECIP_IN, output_fmt=FixedPointFormat(32, RECIP_OUT_FRAC), name="recip",
        ),
        rsqrt=segment_function(
            lambda x: 1.0 / np.sqrt(x), (1.0, 4.0), max_segments=b.rsqrt,
            input_fmt=RSQRT_IN, output_fmt=FixedPointFormat(32, RSQRT_OUT_FRAC), name="rsqrt",
        ),
        gelu=segment_function(
            gelu_exact, cfg.gelu_domain, max_segments=b.gelu,
            input_fmt=cfg.gelu_io, output_fmt=cfg.gelu_io,
            range_policy="extrapolate_last_segment", pinned=GELU_PINNED_KNOTS if b.gelu >= 2 * len(GELU_PINNED_KNOTS) else (), name="gelu",
        ),
    )


def inv_k_raw(k: int) -> int:
    """``round(2**INV_K_FRAC / k)`` as a 64-bit constant (computed offline)."""
    return round(Fraction(1 << INV_K_FRAC, k))


def eps_raw(eps: float) -> int:
    return max(1, round(math.ldexp(eps, 2 * LN_D_FRAC)))


# ---------------------------------------------------------------------------
# fixed-point kernels on raw payloads
# ---------------------------------------------------------------------------


def softmax_fixed(x_raw: np.ndarray, cfg: NonlinearConfig = DEFAULT_CONFIG,
                  tables: Optional[KernelTables] = None) -> np.ndarray:
    """One softmax row; input in ``cfg.softmax_in``, output in ``cfg.softmax_out``."""
    t = tables or build_tables(cfg)
    x = np.asarray(x_raw, dtype=np.int64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    fe = cfg.exp_out.frac_bits
    m = vo.reduce_max(x)
    d = vo.sub(x, m, 16)
    d = vo.vmax(d, int(t.exp.knots[0]))
    e = vo.pwl(d, t.exp)
    s = vo.reduce_sum(e, 32)
    k = vo.leading_one(s, 32)
    mant = vo.shift(s, vo.sub(k, RECIP_IN.frac_bits, 32), RECIP_IN.total_bits, mode="floor")
    r = int(vo.pwl(mant, t.recip))
    # real sum = mant * 2**(k - fe), so e / sum lands at frac fo after a
    # right shift of RECIP_OUT_FRAC + k - fo
    sh = vo.add(k, RECIP_OUT_FRAC - cfg.softmax_out.frac_bits, 32)
    return vo.mul(e, r, int(sh), cfg.softmax_out.total_bits)


def layernorm_fixed(x_raw: np.ndarray, gamma_raw: np.ndarray, beta_raw: np.ndarray,
                    cfg: NonlinearConfig = DEFAULT_CONFIG, tables: Optional[KernelTables] = None,
                    residual_raw: Optional[np.ndarray] = None) -> np.ndarray:
    """One layer-norm row.

    ``x_raw`` (and the optional ``residual_raw`` added first) are in
    ``cfg.ln_in``; ``gamma_raw`` is in ``cfg.ln_gamma`` and ``beta_raw`` in
    ``cfg.ln_out``, which is also the output format.
    """
    t = tables or build_tables(cfg)
    x = np.asarray(x_raw, dtype=np.int64)
    k = x.size
    if k == 0 or len(gamma_raw) != k or len(beta_raw) != k:
        raise ValueError(f"layer-norm width mismatch: x={k}, gamma={len(gamma_raw)}, beta={len(beta_raw)}")
    if residual_raw is not None:
        x = vo.add(x, np.asarray(residual_raw, dtype=np.int64), 16)
    fi = cfg.ln_in.frac_bits
    inv_k = inv_k_raw(k)

    s = vo.reduce_sum(x, 32)
    mu = int(vo.mul(s, inv_k, INV_K_FRAC + fi - LN_D_FRAC, 32))
    d = vo.sub(vo.shift(x, fi - LN_D_FRAC, 32), mu, 32)
    sq = vo.mul(d, d, 0, 64)
    v = vo.reduce_sum(sq, 64)
    var = int(vo.mul(v, inv_k, INV_K_FRAC, 64))
    ve = int(vo.add(var, eps_raw(cfg.ln_eps), 64))

    # ve = m * 4**e with m in [1, 4)
    p = vo.leading_one(ve, 64)
    e = int(vo.shift(vo.sub(p, 2 * LN_D_FRAC, 32), 1, 32, mode="floor"))
    sh = int(vo.add(vo.shift(e, -1, 32), 2 * LN_D_FRAC - RSQRT_IN.frac_bits, 32))
    mant = vo.shift(ve, sh, 16, mode="floor")
    r = int(vo.pwl(mant, t.rsqrt))

    xhat = vo.mul(d, r, LN_D_FRAC + RSQRT_OUT_FRAC - LN_XHAT_FRAC + e, 32)
    g = vo.mul(xhat, np.asarray(gamma_raw, dtype=np.int64),
               LN_XHAT_FRAC + cfg.ln_gamma.frac_bits - cfg.ln_out.frac_bits, 16)
    return vo.add(g, np.asarray(beta_raw, dtype=np.int64), 16)


def gelu_fixed(x_raw: np.ndarray, cfg: NonlinearConfig = DEFAULT_CONFIG,
               tables: Optional[KernelTables] = None) -> np.ndarray:
    t = tables or build_tables(cfg)
    return vo.pwl(np.asarray(x_raw, dtype=np.int64), t.gelu)


def attention_scale_raw(k: float) -> tuple[int, int]:
    """``(mantissa, shift)`` with ``mantissa / 2**shift ~= 1/k`` and a 31-bit mantissa."""
    inv = Fraction(1) / Fraction(k)
    sh = 30 - math.floor(math.log2(inv))
    return round(inv * (1 << sh)), sh


def attention_scale_fixed(x_raw: np.ndarray, s: AttentionScale, in_fmt: FixedPointFormat,
                          out_fmt: FixedPointFormat) -> np.ndarray:
    mant, sh = attention_scale_raw(s.k)
    return vo.mul(np.asarray(x_raw, dtype=np.int64), mant, sh + in_fmt.frac_bits - out_fmt.frac_bits,
                  out_fmt.total_bits)


# ---------------------------------------------------------------------------
# real-valued wrappers
# ---------------------------------------------------------------------------


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def softmax_row(x, mode: str = "reference", cfg: NonlinearConfig = DEFAULT_CONFIG) -> np.ndarray:
    _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("softmax_row needs a non-empty vector")
    if mode == "reference":
        return softmax_reference(x)
    raw = softmax_fixed(quantize_array(x, cfg.softmax_in), cfg)
    return dequantize_array(raw, cfg.softmax_out)


def layernorm_row(x, p: LayerNormParams, mode: str = "reference",
                  cfg: NonlinearConfig = DEFAULT_CONFIG) -> np.ndarray:
    _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != p.gamma.size:
        raise ValueError(f"layer-norm width mismatch: x={x.size}, gamma={p.gamma.size}")
    if mode == "reference":
        return layernorm_reference(x, p.gamma, p.beta, p.epsilon)
    if p.epsilon != cfg.ln_eps:
        cfg = _replace(cfg, ln_eps=p.epsilon)
    raw = layernorm_fixed(
        quantize_array(x, cfg.ln_in),
        quantize_array(p.gamma, cfg.ln_gamma),
        quantize_array(p.beta, cfg.ln_out),
        cfg,
    )
    return dequantize_array(raw, cfg.ln_out)


def gelu(x, mode: str = "reference", cfg: NonlinearConfig = DEFAULT_CONFIG) -> np.ndarray:
    _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if mode == "reference":
        return gelu_exact(x)
    return dequantize_array(gelu_fixed(quantize_array(x, cfg.gelu_io), cfg), cfg.gelu_io)


def apply_attention_scale(x, s: AttentionScale, mode: str = "reference",
                          io_fmt: FixedPointFormat = DEFAULT_CONFIG.softmax_in) -> np.ndarray:
    _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if mode == "reference":
        return x / s.k
    return dequantize_array(attention_scale_fixed(quantize_array(x, io_fmt), s, io_fmt, io_fmt), io_fmt)


def _replace(cfg: NonlinearConfig, **changes) -> NonlinearConfig:
    import dataclasses

    return dataclasses.replace(cfg, **changes)

"""Reference encoder and the fixed-point encoder it validates.

``encoder_forward(..., mode="reference")`` is float64 end to end.  In
``fixed_point`` mode every matmul goes through :func:`mmu.mmu_matmul` and every
nonlinearity through the fixed kernels of :mod:`npe_sim.nonlinear`; values are
requantized at each stage boundary.  Stage formats:

=============  ============  ===============================================
stage          format        note
=============  ============  ===============================================
input X        Q5.11         MMU operand
weights        Q1.15         Gaussian init scale keeps them well inside +-1
Q, K, V, SV    Q5.11
scores         Q6.10         1/sqrt(d) applied as a mantissa/shift multiply
softmax        Q1.15
WO, FF2        Q5.11         requantized to Q6.10 for the residual add
layer norm     Q4.12         also the FF1 operand
FF1, GELU      Q5.11
=============  ============  ===============================================
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import nonlinear as nl
from .fixedpoint import FixedPointFormat, dequantize_array, fmt, quantize_array, rescale
from .mmu import MmuConfig, mmu_matmul
from .workload import ModelConfig

MODES = nl.MODES
X_FMT = fmt("Q5.11@16")
W_FMT = fmt("Q1.15@16")
REL_FLOOR = 1e-6
WEIGHTS_MAGIC = b"NPEW"
WEIGHTS_VERSION = 1

_ARRAYS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
           "ln_a_gamma", "ln_a_beta", "ln_b_gamma", "ln_b_beta")


class WeightsFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EncoderWeights:
    """Weights of one encoder; ``wq/wk/wv`` are stacked per head as ``(A, H, H/A)``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln_a_gamma: np.ndarray
    ln_a_beta: np.ndarray
    ln_b_gamma: np.ndarray
    ln_b_beta: np.ndarray
    seed: Optional[int] = None
    scale: Optional[float] = None

    def __post_init__(self):
        for name in _ARRAYS:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        a, h, dh = self.wq.shape if self.wq.ndim == 3 else (0, 0, 0)
        f = self.w1.shape[1] if self.w1.ndim == 2 else 0
        want = {
            "wq": (a, h, dh), "wk": (a, h, dh), "wv": (a, h, dh), "wo": (h, h),
            "w1": (h, f), "b1": (f,), "w2": (f, h), "b2": (h,),
            "ln_a_gamma": (h,), "ln_a_beta": (h,), "ln_b_gamma": (h,), "ln_b_beta": (h,),
        }
        if a == 0 or a * dh != h:
            raise ValueError(f"wq must have shape (A, H, H/A), got {self.wq.shape}")
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def model(self) -> ModelConfig:
        a, h, _ = self.wq.shape
        return ModelConfig(L=1, A=a, H=h, ff_dim=self.w1.shape[1])

    def matches(self, cfg: ModelConfig) -> bool:
        m = self.model
        return (m.A, m.H, m.ff_dim) == (cfg.A, cfg.H, cfg.ff_dim)

    @classmethod
    def random(cls, cfg: ModelConfig, seed: int, scale: float = 0.02) -> "EncoderWeights":
        rng = np.random.default_rng(seed)
        a, h, f, dh = cfg.A, cfg.H, cfg.ff_dim, cfg.head_dim

        def g(*shape):
            return rng.normal(0.0, scale, size=shape)

        return cls(
            wq=g(a, h, dh), wk=g(a, h, dh), wv=g(a, h, dh), wo=g(h, h),
            w1=g(h, f), b1=g(f), w2=g(f, h), b2=g(h),
            ln_a_gamma=1.0 + g(h), ln_a_beta=g(h), ln_b_gamma=1.0 + g(h), ln_b_beta=g(h),
            seed=seed, scale=scale,
        )

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "EncoderWeights":
        a, h, f, dh = cfg.A, cfg.H, cfg.ff_dim, cfg.head_dim
        z = np.zeros
        return cls(z((a, h, dh)), z((a, h, dh)), z((a, h, dh)), z((h, h)), z((h, f)), z(f), z((f, h)), z(h),
                   np.ones(h), z(h), np.ones(h), z(h))

    # -- binary container: magic, u32 header length, JSON header, float64 data

    def to_bytes(self) -> bytes:
        arrays, offset, blobs = [], 0, []
        for name in _ARRAYS:
            data = np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes()
            arrays.append({"name": name, "shape": list(getattr(self, name).shape), "dtype": "<f8",
                           "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
        header = {
            "kind": "npe-encoder-weights",
            "version": WEIGHTS_VERSION,
            "seed": self.seed,
            "scale": self.scale,
            "formats": {"weights": str(W_FMT), "activations": str(X_FMT)},
            "arrays": arrays,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
        return WEIGHTS_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EncoderWeights":
        if buf[:4] != WEIGHTS_MAGIC or len(buf) < 8:
            raise WeightsFormatError("not an encoder weight file (bad magic)")
        (n,) = struct.unpack("<I", buf[4:8])
        try:
            header = json.loads(buf[8 : 8 + n].decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WeightsFormatError(f"corrupt header: {exc}") from None
        if header.get("version") != WEIGHTS_VERSION:
            raise WeightsFormatError(f"unsupported weight file version {header.get('version')!r}")
        body = memoryview(buf)[8 + n :]
        out = {}
        for spec in header.get("arrays", []):
            start, size = spec["offset"], spec["nbytes"]
            if spec.get("dtype") != "<f8" or start + size > len(body):
                raise WeightsFormatError(f"array {spec.get('name')!r} is truncated or has an unknown dtype")
            out[spec["name"]] = np.frombuffer(body[start : start + size], dtype="<f8").reshape(spec["shape"]).copy()
        missing = [a for a in _ARRAYS if a not in out]
        if missing:
            raise WeightsFormatError(f"missing arrays: {missing}")
        return cls(**out, seed=header.get("seed"), scale=header.get("scale"))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EncoderWeights":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _forward_reference(x: np.ndarray, w: EncoderWeights, taps: dict) -> np.ndarray:
    a, _, dh = w.wq.shape
    heads = []
    for h in range(a):
        q, k, v = x @ w.wq[h], x @ w.wk[h], x @ w.wv[h]
        scores = (q @ k.T) / math.sqrt(dh)
        p = nl.softmax_reference(scores)
        sv = p @ v
        taps.update({f"h{h}.Q": q, f"h{h}.K": k, f"h{h}.V": v, f"h{h}.QK": scores,
                     f"h{h}.softmax": p, f"h{h}.SV": sv})
        heads.append(sv)
    x1 = np.concatenate(heads, axis=1) @ w.wo
    x2 = nl.layernorm_reference(x + x1, w.ln_a_gamma, w.ln_a_beta, nl.DEFAULT_CONFIG.ln_eps)
    f1 = x2 @ w.w1 + w.b1
    x3 = nl.gelu_exact(f1)
    x4 = x3 @ w.w2 + w.b2
    x5 = nl.layernorm_reference(x2 + x4, w.ln_b_gamma, w.ln_b_beta, nl.DEFAULT_CONFIG.ln_eps)
    taps.update({"WO": x1, "LN_A": x2, "FF1": f1, "GELU": x3, "FF2": x4, "LN_B": x5})
    return x5


def _forward_fixed(x: np.ndarray, w: EncoderWeights, cfg: nl.NonlinearConfig, mmu: MmuConfig,
                   taps: dict) -> np.ndarray:
    if mmu.precision != "int16":
        raise ValueError("the fixed-point encoder uses 16-bit MMU operands")
    t = nl.build_tables(cfg)
    a, _, dh = w.wq.shape
    fw, fx = W_FMT.frac_bits, X_FMT.frac_bits
    sm_in, sm_out, ln_in, ln_out = cfg.softmax_in, cfg.softmax_out, cfg.ln_in, cfg.ln_out
    scale = nl.AttentionScale(math.sqrt(dh))

    def mm(a_raw, b_raw, fa, fb, out_fmt, bias=None):
        bias_acc = None if bias is None else quantize_array(bias, FixedPointFormat(32, fa + fb))
        return mmu_matmul(a_raw, b_raw, mmu, fa, fb, out_fmt, bias_acc)[0]

    def tap(name, raw, f):
        taps[name] = dequantize_array(raw, f)

    xr = quantize_array(x, X_FMT)
    heads = []
    for h in range(a):
        q = mm(xr, quantize_array(w.wq[h], W_FMT), fx, fw, X_FMT)
        k = mm(xr, quantize_array(w.wk[h], W_FMT), fx, fw, X_FMT)
        v = mm(xr, quantize_array(w.wv[h], W_FMT), fx, fw, X_FMT)
        raw_scores = mm(q, k.T, fx, fx, sm_in)
        scores = nl.attention_scale_fixed(raw_scores, scale, sm_in, sm_in)
        p = np.stack([nl.softmax_fixed(row, cfg, t) for row in scores])
        sv = mm(p, v, sm_out.frac_bits, fx, X_FMT)
        for name, raw, f in (("Q", q, X_FMT), ("K", k, X_FMT), ("V", v, X_FMT), ("QK", scores, sm_in),
                             ("softmax", p, sm_out), ("SV", sv, X_FMT)):
            tap(f"h{h}.{name}", raw, f)
        heads.append(sv)
    x1 = mm(np.concatenate(heads, axis=1), quantize_array(w.wo, W_FMT), fx, fw, X_FMT)

    def add_norm(main, main_frac, res, res_frac, gamma, beta):
        m = rescale(main, main_frac, ln_in)
        r = rescale(res, res_frac, ln_in)
        g = quantize_array(gamma, cfg.ln_gamma)
        b = quantize_array(beta, ln_out)
        return np.stack([nl.layernorm_fixed(m[i], g, b, cfg, t, residual_raw=r[i]) for i in range(len(m))])

    x2 = add_norm(x1, fx, xr, fx, w.ln_a_gamma, w.ln_a_beta)
    f1 = mm(x2, quantize_array(w.w1, W_FMT), ln_out.frac_bits, fw, cfg.gelu_io, w.b1)
    x3 = nl.gelu_fixed(f1, cfg, t)
    x4 = mm(x3, quantize_array(w.w2, W_FMT), cfg.gelu_io.frac_bits, fw, X_FMT, w.b2)
    x5 = add_norm(x4, fx, x2, ln_out.frac_bits, w.ln_b_gamma, w.ln_b_beta)
    for name, raw, f in (("WO", x1, X_FMT), ("LN_A", x2, ln_out), ("FF1", f1, cfg.gelu_io),
                         ("GELU", x3, cfg.gelu_io), ("FF2", x4, X_FMT), ("LN_B", x5, ln_out)):
        tap(name, raw, f)
    return dequantize_array(x5, ln_out)


def encoder_forward(x, w: EncoderWeights, mode: str = "reference",
                    cfg: nl.NonlinearConfig = nl.DEFAULT_CONFIG, mmu_cfg: MmuConfig = MmuConfig(),
                    taps: Optional[dict] = None) -> np.ndarray:
    """One encoder layer on ``x`` of shape ``(seq_len, H)``.

    ``taps``, if given, is filled with the real-valued output of every stage
    keyed by node name (``"h0.QK"``, ``"LN_A"``, ...).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    h = w.wo.shape[0]
    if x.ndim != 2 or x.shape[1] != h or x.shape[0] < 1:
        raise ValueError(f"input must have shape (seq_len, {h}), got {x.shape}")
    taps = {} if taps is None else taps
    if mode == "reference":
        return _forward_reference(x, w, taps)
    return _forward_fixed(x, w, cfg, mmu_cfg, taps)


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorMetrics:
    max_abs: float
    mean_abs: float
    max_rel: float
    argmax: tuple
    per_stage: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "per_stage"}


def _metrics(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float, tuple]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0, 0.0, 0.0, ()
    d = np.abs(a - b)
    i = np.unravel_index(int(np.argmax(d)), d.shape)
    rel = d / np.maximum(np.abs(a), REL_FLOOR)
    return float(d[i]), float(d.mean()), float(rel.max()), tuple(int(v) for v in i)


def compare(a, b, taps_a: Optional[dict] = None, taps_b: Optional[dict] = None) -> ErrorMetrics:
    """Error of ``b`` against ``a``; relative error divides by ``max(|a|, 1e-6)``."""
    mx, mean, rel, arg = _metrics(a, b)
    per_stage = {}
    if taps_a and taps_b:
        for k in taps_a:
            if k in taps_b:
                s = _metrics(taps_a[k], taps_b[k])
                per_stage[k] = {"max_abs": s[0], "mean_abs": s[1], "max_rel": s[2]}
    return ErrorMetrics(mx, mean, rel, arg, per_stage)


def accuracy_trial(cfg: ModelConfig, seed: int, ncfg: nl.NonlinearConfig = nl.DEFAULT_CONFIG,
                   weight_scale: float = 0.02) -> ErrorMetrics:
    """Random weights and N(0, 1) input from ``seed``; fixed point vs reference."""
    w = EncoderWeights.random(cfg, seed, weight_scale)
    x = np.random.default_rng([seed, 1]).normal(size=(cfg.seq_len, cfg.H))
    ta, tb = {}, {}
    ref = encoder_forward(x, w, "reference", taps=ta)
    fx = encoder_forward(x, w, "fixed_point", ncfg, taps=tb)
    return compare(ref, fx, ta, tb)

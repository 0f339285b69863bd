"""Microprogram expansion: kernel recipes, bundle packing, register allocation.

Each kernel recipe emits a straight-line trace of micro-ops on virtual
registers.  :func:`pack` then issues the trace in order into VLIW bundles
under the unit, port and latency rules of :func:`op_timing`, and
:func:`allocate` maps virtual registers onto the 32-entry VRF and the SRF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import nonlinear as nl
from .config import NvuConfig
from .isa import (
    KERNELS,
    MAX_LSU,
    MAX_SCU,
    MAX_VRF_ACCESSES,
    MULTIPLIER_KINDS,
    REDUCE_KINDS,
    Imm,
    Microprogram,
    Op,
    Reg,
    VliwBundle,
)

ALU_SLOTS = 2  # VCU slots 1 and 2; slot 0 hosts the multiplier / table unit


class ExpansionError(ValueError):
    pass


@dataclass(frozen=True)
class OpTiming:
    resource: str  # "lsu", "alu", "mul", "scu"
    occupancy: int
    ready: int  # cycles after issue at which a consumer may issue


def op_timing(op: Op, cfg: NvuConfig) -> OpTiming:
    if op.unit == "lsu":
        return OpTiming("lsu", 1, 0)
    if op.unit == "scu":
        return OpTiming("scu", 1, cfg.timing.scu_latency(op.kind))
    if op.kind in MULTIPLIER_KINDS:
        if op.kind == "pwl_eval":
            occ = cfg.pwl_occupancy
        else:
            wa, wb = op.attr("widths", (16, 16))
            occ = cfg.mul_occupancy(wa, wb)
        return OpTiming("mul", occ, occ - 1)
    if op.kind in REDUCE_KINDS:
        return OpTiming("alu", 1, cfg.reduce_latency_for(op.attr("active", cfg.lanes)))
    return OpTiming("alu", 1, 0)


# ---------------------------------------------------------------------------
# trace builder
# ---------------------------------------------------------------------------


class _Trace:
    def __init__(self):
        self.ops: list[Op] = []
        self._nv = 0
        self._ns = 0

    def v(self) -> Reg:
        self._nv += 1
        return Reg("v", self._nv - 1)

    def s(self) -> Reg:
        self._ns += 1
        return Reg("s", self._ns - 1)

    def emit(self, unit, kind, dst, *srcs, **attrs) -> Optional[Reg]:
        srcs = tuple(x if isinstance(x, Reg) else Imm(int(x)) for x in srcs)
        self.ops.append(Op(unit, kind, dst, srcs, tuple(sorted(attrs.items()))))
        return dst

    # convenience wrappers
    def load(self, buf, i, count):
        return self.emit("lsu", "load", self.v(), buf=buf, index=i, count=count, mode="non_strided")

    def store(self, buf, i, src):
        self.emit("lsu", "store", None, src, buf=buf, index=i, mode="non_strided")

    def vop(self, kind, *srcs, **attrs):
        return self.emit("vcu", kind, self.v(), *srcs, **attrs)

    def reduce(self, kind, src, **attrs):
        return self.emit("vcu", kind, self.s(), src, **attrs)

    def sop(self, kind, *srcs, **attrs):
        return self.emit("scu", kind, self.s(), *srcs, **attrs)


def _chunks(n: int, lanes: int) -> list[int]:
    full, rem = divmod(n, lanes)
    return [lanes] * full + ([rem] if rem else [])


def _accumulate(tr: _Trace, acc, val, kind, **attrs):
    return val if acc is None else tr.vop(kind, acc, val, **attrs)


def _softmax_trace(n, cfg: NvuConfig, ncfg: nl.NonlinearConfig, tables: nl.KernelTables) -> _Trace:
    tr = _Trace()
    counts = _chunks(n, cfg.lanes)
    lo = int(tables.exp.knots[0])
    fo = ncfg.softmax_out.frac_bits

    acc = None
    for i, c in enumerate(counts):
        acc = _accumulate(tr, acc, tr.load("x", i, c), "max")
    m = tr.reduce("max_reduce", acc, active=min(n, cfg.lanes))

    acc = None
    for i, c in enumerate(counts):
        x = tr.load("x", i, c)
        d = tr.vop("sub", x, m, bits=16)
        d = tr.vop("max", d, lo)
        e = tr.vop("pwl_eval", d, table="exp")
        tr.store("tmp", i, e)
        acc = _accumulate(tr, acc, e, "add", bits=32)
    s = tr.reduce("sum_reduce", acc, bits=32, active=min(n, cfg.lanes))

    k = tr.sop("find_segment", s, bits=32)
    sh = tr.sop("add", k, nl.RECIP_OUT_FRAC - fo, bits=32)
    t = tr.sop("sub", k, nl.RECIP_IN.frac_bits, bits=32)
    mant = tr.sop("shift", s, t, bits=nl.RECIP_IN.total_bits, mode="floor")
    r = tr.sop("pwl_eval", mant, table="recip")

    for i, c in enumerate(counts):
        e = tr.load("tmp", i, c)
        y = tr.vop("mul", e, r, sh, bits=ncfg.softmax_out.total_bits, widths=(16, 32))
        tr.store("out", i, y)
    return tr


def _ln_input(tr: _Trace, i, c, residual: bool):
    x = tr.load("x", i, c)
    if residual:
        x = tr.vop("add", x, tr.load("res", i, c), bits=16)
    return x


def _layernorm_trace(n, cfg: NvuConfig, ncfg: nl.NonlinearConfig, residual: bool) -> _Trace:
    tr = _Trace()
    counts = _chunks(n, cfg.lanes)
    fi = ncfg.ln_in.frac_bits
    up = fi - nl.LN_D_FRAC
    inv_k = nl.inv_k_raw(n)

    acc = None
    for i, c in enumerate(counts):
        acc = _accumulate(tr, acc, _ln_input(tr, i, c, residual), "add", bits=32)
    s = tr.reduce("sum_reduce", acc, bits=32, active=min(n, cfg.lanes))
    mu = tr.sop("mul", s, inv_k, nl.INV_K_FRAC + fi - nl.LN_D_FRAC, bits=32)

    acc = None
    for i, c in enumerate(counts):
        x = _ln_input(tr, i, c, residual)
        d = tr.vop("sub", tr.vop("shift", x, up, bits=32), mu, bits=32)
        sq = tr.vop("mul", d, d, 0, bits=64, widths=(32, 32))
        acc = _accumulate(tr, acc, sq, "add", bits=64)
    v = tr.reduce("sum_reduce", acc, bits=64, active=min(n, cfg.lanes))

    var = tr.sop("mul", v, inv_k, nl.INV_K_FRAC, bits=64)
    ve = tr.sop("add", var, nl.eps_raw(ncfg.ln_eps), bits=64)
    p = tr.sop("find_segment", ve, bits=64)
    q = tr.sop("sub", p, 2 * nl.LN_D_FRAC, bits=32)
    e = tr.sop("shift", q, 1, bits=32, mode="floor")
    e2 = tr.sop("shift", e, -1, bits=32)
    sh = tr.sop("add", e2, 2 * nl.LN_D_FRAC - nl.RSQRT_IN.frac_bits, bits=32)
    xs = tr.sop("add", e, nl.LN_D_FRAC + nl.RSQRT_OUT_FRAC - nl.LN_XHAT_FRAC, bits=32)
    mant = tr.sop("shift", ve, sh, bits=16, mode="floor")
    r = tr.sop("pwl_eval", mant, table="rsqrt")

    g_shift = nl.LN_XHAT_FRAC + ncfg.ln_gamma.frac_bits - ncfg.ln_out.frac_bits
    for i, c in enumerate(counts):
        x = _ln_input(tr, i, c, residual)
        d = tr.vop("sub", tr.vop("shift", x, up, bits=32), mu, bits=32)
        xhat = tr.vop("mul", d, r, xs, bits=32, widths=(32, 32))
        g = tr.vop("mul", xhat, tr.load("gamma", i, c), g_shift, bits=16, widths=(32, 16))
        y = tr.vop("add", g, tr.load("beta", i, c), bits=16)
        tr.store("out", i, y)
    return tr


def _gelu_trace(n, cfg: NvuConfig) -> _Trace:
    tr = _Trace()
    for i, c in enumerate(_chunks(n, cfg.lanes)):
        tr.store("out", i, tr.vop("pwl_eval", tr.load("x", i, c), table="gelu"))
    return tr


def _vector_add_trace(n, cfg: NvuConfig) -> _Trace:
    tr = _Trace()
    for i, c in enumerate(_chunks(n, cfg.lanes)):
        a = tr.load("a", i, c)
        b = tr.load("b", i, c)
        tr.store("out", i, tr.vop("add", a, b, bits=16))
    return tr


# ---------------------------------------------------------------------------
# packing and allocation
# ---------------------------------------------------------------------------


def pack(ops: list[Op], cfg: NvuConfig) -> list[int]:
    """Compile-time list scheduling; returns the issue cycle of every op.

    Ops are placed greedily in trace order at their earliest legal cycle.
    An op may move ahead of earlier ops, but never ahead of the op
    ``timing.lookahead`` positions before it, which bounds register pressure
    the way a modulo-scheduled loop body would.  A load of a buffer slot
    written earlier in the trace issues strictly after that store.
    """
    look = cfg.timing.lookahead
    ready: dict[Reg, int] = {}
    stored: dict[tuple, int] = {}
    mul_busy: set[int] = set()
    per_cycle: dict[int, dict] = {}
    issue: list[int] = []
    for j, op in enumerate(ops):
        tm = op_timing(op, cfg)
        t = issue[j - look] if j >= look else 0
        for src in op.srcs:
            if isinstance(src, Reg):
                if src not in ready:
                    raise ExpansionError(f"register {src} read before it is written")
                t = max(t, ready[src])
        if op.kind == "load":
            t = max(t, stored.get((op.attr("buf"), op.attr("index")), -1) + 1)
        limit = {"lsu": MAX_LSU, "alu": ALU_SLOTS, "mul": 1, "scu": MAX_SCU}[tm.resource]
        while True:
            slot = per_cycle.setdefault(t, {"lsu": 0, "alu": 0, "mul": 0, "scu": 0, "regs": set()})
            regs = slot["regs"] | op.vrf_regs()
            ok = slot[tm.resource] < limit and len(regs) <= MAX_VRF_ACCESSES
            if ok and tm.resource == "mul":
                ok = not any(c in mul_busy for c in range(t, t + tm.occupancy))
            if ok:
                break
            t += 1
        slot[tm.resource] += 1
        slot["regs"] = regs
        if tm.resource == "mul":
            mul_busy.update(range(t, t + tm.occupancy))
        if op.dst is not None:
            ready[op.dst] = t + tm.ready
        if op.kind == "store":
            stored[(op.attr("buf"), op.attr("index"))] = t
        issue.append(t)
    return issue


def allocate(ops: list[Op], issue: list[int], cfg: NvuConfig) -> list[Op]:
    """Map virtual registers to physical ones by linear scan over issue times.

    A physical register is reused only by a definition issued strictly after
    the last read of its previous value.  Returns the ops in issue order.
    """
    last_use: dict[Reg, int] = {}
    for op, t in zip(ops, issue):
        for s in op.srcs:
            if isinstance(s, Reg):
                last_use[s] = max(t, last_use.get(s, t))
    free_at = {"v": [-1] * cfg.vrf_registers, "s": [-1] * cfg.srf_registers}
    mapping: dict[Reg, Reg] = {}
    out = []
    for j in sorted(range(len(ops)), key=lambda j: (issue[j], j)):
        op, t = ops[j], issue[j]
        srcs = tuple(mapping[s] if isinstance(s, Reg) else s for s in op.srcs)
        dst = None
        if op.dst is not None:
            f = op.dst.file
            pool = free_at[f]
            idx = next((i for i, u in enumerate(pool) if u < t), None)
            if idx is None:
                raise ExpansionError(f"out of {f}-registers at cycle {t}")
            pool[idx] = last_use.get(op.dst, t)
            dst = mapping[op.dst] = Reg(f, idx)
        out.append((t, Op(op.unit, op.kind, dst, srcs, op.attrs)))
    return out


class Scoreboard:
    """Issue-time model of the microprogram controller.

    A bundle issues one cycle after its predecessor unless a source register
    produced by an earlier bundle is not ready yet or the multiplier slot is
    still busy; results chained inside a bundle do not wait.
    """

    def __init__(self, cfg: NvuConfig):
        self.cfg = cfg
        self.ready: dict[Reg, int] = {}
        self.mul_free = 0
        self.t = -1
        self.stalls = 0

    def earliest(self, b: VliwBundle) -> int:
        earliest = self.t + 1
        local = {o.dst for o in b.ops() if o.dst is not None}
        for op in b.ops():
            for s in op.srcs:
                if isinstance(s, Reg) and s in self.ready and s not in local:
                    earliest = max(earliest, self.ready[s])
            if op_timing(op, self.cfg).resource == "mul":
                earliest = max(earliest, self.mul_free)
        return earliest

    def issue(self, b: VliwBundle) -> int:
        t = self.earliest(b)
        self.stalls += t - (self.t + 1)
        self.t = t
        for op in b.ops():
            tm = op_timing(op, self.cfg)
            if tm.resource == "mul":
                self.mul_free = t + tm.occupancy
            if op.dst is not None:
                self.ready[op.dst] = t + tm.ready
        return t


def dynamic_issue(bundles, cfg: NvuConfig) -> tuple[list[int], int]:
    """Issue cycle of each bundle under the scoreboard, and the stall count."""
    sb = Scoreboard(cfg)
    times = [sb.issue(b) for b in bundles]
    return times, sb.stalls


def _bundle(ops: list[Op]) -> VliwBundle:
    return VliwBundle(
        lsu=tuple(o for o in ops if o.unit == "lsu"),
        vcu=tuple(o for o in ops if o.unit == "vcu"),
        scu=tuple(o for o in ops if o.unit == "scu"),
    )


def trace_ops(kernel: str, n_elements: int, cfg: NvuConfig, ncfg: nl.NonlinearConfig = nl.DEFAULT_CONFIG,
              residual: bool = False) -> list[Op]:
    if kernel not in KERNELS:
        raise ExpansionError(f"unsupported kernel {kernel!r}; expected one of {KERNELS}")
    if n_elements <= 0:
        raise ExpansionError("n_elements must be positive")
    if residual and kernel != "layernorm":
        raise ExpansionError("residual fusion applies to layernorm only")
    if kernel == "softmax":
        return _softmax_trace(n_elements, cfg, ncfg, nl.build_tables(ncfg)).ops
    if kernel == "layernorm":
        return _layernorm_trace(n_elements, cfg, ncfg, residual).ops
    if kernel == "gelu":
        return _gelu_trace(n_elements, cfg).ops
    return _vector_add_trace(n_elements, cfg).ops


_INPUTS = {
    "softmax": ("x",),
    "layernorm": ("x", "gamma", "beta"),
    "gelu": ("x",),
    "vector_add": ("a", "b"),
}


def _formats(kernel: str, ncfg: nl.NonlinearConfig) -> tuple:
    f = {
        "softmax": (("in", ncfg.softmax_in), ("exp", ncfg.exp_out), ("out", ncfg.softmax_out)),
        "layernorm": (("in", ncfg.ln_in), ("centred", f"Q{32 - nl.LN_D_FRAC}.{nl.LN_D_FRAC}@32"),
                      ("xhat", f"Q{32 - nl.LN_XHAT_FRAC}.{nl.LN_XHAT_FRAC}@32"), ("gamma", ncfg.ln_gamma),
                      ("out", ncfg.ln_out)),
        "gelu": (("in", ncfg.gelu_io), ("out", ncfg.gelu_io)),
        "vector_add": (("in", "Q16.0@16"), ("out", "Q16.0@16")),
    }[kernel]
    return tuple((k, str(v)) for k, v in f)


def expand_microprogram(kernel: str, n_elements: int, cfg: NvuConfig,
                        ncfg: nl.NonlinearConfig = nl.DEFAULT_CONFIG, residual: bool = False) -> Microprogram:
    ops = trace_ops(kernel, n_elements, cfg, ncfg, residual)
    issue = pack(ops, cfg)
    groups: dict[int, list[Op]] = {}
    for t, op in allocate(ops, issue, cfg):
        groups.setdefault(t, []).append(op)
    # pad with NOP bundles wherever the static schedule is later than the
    # scoreboard alone would issue, so execution reproduces it exactly
    sb = Scoreboard(cfg)
    bundles: list[VliwBundle] = []
    cycles: list[int] = []
    for t in sorted(groups):
        b = _bundle(groups[t])
        while sb.earliest(b) < t:
            cycles.append(sb.issue(VliwBundle()))
            bundles.append(VliwBundle())
        if sb.issue(b) != t:
            raise ExpansionError(f"scoreboard disagrees with the static schedule at cycle {t}")
        bundles.append(b)
        cycles.append(t)
    inputs = _INPUTS[kernel] + (("res",) if residual else ())
    tables = {k: v for k, v in nl.build_tables(ncfg).as_dict().items()
              if any(o.attr("table") == k for o in ops)}
    return Microprogram(
        kernel=kernel,
        n_elements=n_elements,
        vrwidth_bits=cfg.vrwidth_bits,
        bundles=bundles,
        inputs=inputs,
        output="out",
        element_fmt=_formats(kernel, ncfg),
        tables=tables,
        residual=residual,
        issue_cycles=tuple(cycles),
    )


def scheduled_cycles(kernel: str, n_elements: int, cfg: NvuConfig,
                     ncfg: nl.NonlinearConfig = nl.DEFAULT_CONFIG, residual: bool = False) -> int:
    """Cycle count of the packed trace (no functional simulation)."""
    if n_elements == 0:
        return 0
    issue = pack(trace_ops(kernel, n_elements, cfg, ncfg, residual), cfg)
    return issue[-1] + 1

"""Micro-operations, VLIW bundles and microprograms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from ..approx import PwlTable

KERNELS = ("softmax", "layernorm", "gelu", "vector_add")

VCU_KINDS = frozenset(
    {"add", "sub", "mul", "shift", "compare", "min", "max", "sum_reduce", "max_reduce", "dot", "permute",
     "pwl_eval", "find_segment"}
)
SCU_KINDS = frozenset({"add", "sub", "mul", "shift", "compare", "min", "max", "pwl_eval", "find_segment"})
LSU_KINDS = frozenset({"load", "store"})
ADDRESSING = ("non_strided", "strided", "indexed")
MULTIPLIER_KINDS = frozenset({"mul", "pwl_eval", "dot"})
REDUCE_KINDS = frozenset({"sum_reduce", "max_reduce"})

MAX_LSU = 1
MAX_VCU = 3
MAX_SCU = 1
MAX_VRF_ACCESSES = 8


@dataclass(frozen=True)
class Reg:
    file: str  # "v" or "s"
    index: int

    def __str__(self) -> str:
        return f"{self.file}{self.index}"


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return f"#{self.value}"


Operand = Union[Reg, Imm]


@dataclass(frozen=True)
class Op:
    """One micro-operation.

    ``attrs`` is a sorted tuple of ``(key, value)`` pairs; common keys are
    ``bits`` (destination width), ``mode`` (shift rounding), ``table`` (table
    id), ``widths`` (operand widths, for multiplier occupancy), ``buf``,
    ``index`` and ``count`` (for memory ops).
    """

    unit: str
    kind: str
    dst: Optional[Reg]
    srcs: tuple
    attrs: tuple = ()

    def attr(self, key, default=None):
        for k, v in self.attrs:
            if k == key:
                return v
        return default

    def vrf_regs(self) -> set:
        regs = {r for r in self.srcs if isinstance(r, Reg) and r.file == "v"}
        if self.dst is not None and self.dst.file == "v":
            regs.add(self.dst)
        return regs

    def text(self) -> str:
        parts = [str(self.dst)] if self.dst is not None else []
        if self.kind in LSU_KINDS:
            parts.append(f"{self.attr('buf')}[{self.attr('index')}]")
        parts += [str(s) for s in self.srcs]
        extra = [f"{k}={v}" for k, v in self.attrs if k not in ("buf", "index", "widths")]
        s = f"{self.kind} " + ", ".join(parts)
        return s + (f" {{{' '.join(extra)}}}" if extra else "")


@dataclass(frozen=True)
class VliwBundle:
    lsu: tuple = ()
    vcu: tuple = ()
    scu: tuple = ()

    def ops(self) -> tuple:
        return self.lsu + self.vcu + self.scu

    def ordered_ops(self) -> list:
        """Ops in dataflow order, so chained results feed same-bundle consumers."""
        pending = list(self.ops())
        done: list = []
        while pending:
            for o in pending:
                deps = {p.dst for p in pending if p is not o and p.dst is not None}
                if not any(isinstance(r, Reg) and r in deps for r in o.srcs):
                    done.append(o)
                    pending.remove(o)
                    break
            else:
                raise ValueError("cyclic dependency inside a bundle")
        return done

    def violations(self) -> list[str]:
        out = []
        if len(self.lsu) > MAX_LSU:
            out.append(f"{len(self.lsu)} LSU ops")
        if len(self.vcu) > MAX_VCU:
            out.append(f"{len(self.vcu)} VCU ops")
        if len(self.scu) > MAX_SCU:
            out.append(f"{len(self.scu)} SCU ops")
        if sum(1 for o in self.vcu if o.kind in MULTIPLIER_KINDS) > 1:
            out.append("two multiplier ops in one bundle")
        for o in self.lsu:
            if o.kind not in LSU_KINDS or o.attr("mode", "non_strided") not in ADDRESSING:
                out.append(f"bad LSU op {o.kind}")
        for o in self.vcu:
            if o.kind not in VCU_KINDS:
                out.append(f"bad VCU op {o.kind}")
        for o in self.scu:
            if o.kind not in SCU_KINDS:
                out.append(f"bad SCU op {o.kind}")
        regs = set().union(*(o.vrf_regs() for o in self.ops())) if self.ops() else set()
        if len(regs) > MAX_VRF_ACCESSES:
            out.append(f"{len(regs)} VRF accesses")
        if len(self.ops()) > MAX_LSU + MAX_VCU + MAX_SCU:
            out.append("more than five operations")
        return out

    def text(self) -> str:
        def col(name, ops):
            return f"{name}: " + (" ; ".join(o.text() for o in ops) if ops else "-")

        return " | ".join((col("LSU", self.lsu), col("VCU", self.vcu), col("SCU", self.scu)))


@dataclass(frozen=True)
class Microprogram:
    kernel: str
    n_elements: int
    vrwidth_bits: int
    bundles: tuple
    inputs: tuple  # buffer names the caller must supply
    output: str
    element_fmt: tuple  # (stage, "Qi.f@b") pairs
    tables: dict = field(default_factory=dict, compare=False)  # id -> PwlTable
    residual: bool = False
    issue_cycles: tuple = ()  # static issue cycle of each bundle

    def listing(self) -> str:
        head = [
            f"; kernel={self.kernel} n={self.n_elements} vrwidth={self.vrwidth_bits}"
            + (" residual" if self.residual else ""),
            "; formats " + " ".join(f"{k}={v}" for k, v in self.element_fmt),
        ]
        cyc = self.issue_cycles or tuple(range(len(self.bundles)))
        body = [f"{i:04d} @{c:<5d} {b.text()}" for i, (b, c) in enumerate(zip(self.bundles, cyc))]
        return "\n".join(head + body) + "\n"

    def table(self, tid: str) -> PwlTable:
        return self.tables[tid]

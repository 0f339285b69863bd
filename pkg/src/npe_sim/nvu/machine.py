"""Functional and cycle execution of microprograms.

Register contents are numpy arrays (VRF) or Python ints (SRF).  A vector
register loaded from a partial tail holds fewer lanes; element-wise ops on
operands of different lane counts update the common prefix and keep the
remaining lanes of the first operand, which is how the lane-wise
accumulators absorb a short final chunk.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .. import vecops as vo
from ..fixedpoint import FixedWord
from .config import NvuConfig
from .expand import dynamic_issue
from .isa import Imm, Microprogram, Op, Reg


class ExecutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExecutionResult:
    outputs: dict
    cycles: int
    stall_cycles: int
    bundles: int


def check_legality(program: Microprogram) -> None:
    for i, b in enumerate(program.bundles):
        bad = b.violations()
        if bad:
            raise ExecutionError(f"bundle {i} is illegal: {', '.join(bad)}")


def _raw(values) -> np.ndarray:
    if len(values) and isinstance(values[0], FixedWord):
        return np.array([w.raw for w in values], dtype=np.int64)
    return np.asarray(values, dtype=np.int64)


class _Machine:
    def __init__(self, program: Microprogram, cfg: NvuConfig, nmem: dict):
        self.p = program
        self.cfg = cfg
        self.vrf: dict[int, np.ndarray] = {}
        self.srf: dict[int, int] = {}
        self.nmem = nmem
        self.lanes = cfg.lanes

    def read(self, operand):
        if isinstance(operand, Imm):
            return operand.value
        bank = self.vrf if operand.file == "v" else self.srf
        if operand.index not in bank:
            raise ExecutionError(f"register {operand} read before it was written")
        return bank[operand.index]

    def write(self, reg: Reg, value) -> None:
        limit = self.cfg.vrf_registers if reg.file == "v" else self.cfg.srf_registers
        if not 0 <= reg.index < limit:
            raise ExecutionError(f"register {reg} outside the register file")
        if reg.file == "v":
            self.vrf[reg.index] = np.asarray(value)
        else:
            self.srf[reg.index] = int(value)

    def _binary(self, fn, a, b):
        if isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and a.size != b.size:
            if a.size < b.size:
                raise ExecutionError("shorter accumulator than operand")
            out = a.copy()
            out[: b.size] = fn(a[: b.size], b)
            return out
        return fn(a, b)

    def step(self, op: Op) -> None:
        k = op.kind
        if k == "load":
            buf = self.nmem[op.attr("buf")]
            start = op.attr("index") * self.lanes
            chunk = buf[start : start + op.attr("count")]
            self.write(op.dst, np.array(chunk, dtype=np.int64))
            return
        if k == "store":
            val = self.read(op.srcs[0])
            start = op.attr("index") * self.lanes
            buf = self.nmem.setdefault(op.attr("buf"), np.zeros(self.p.n_elements, dtype=np.int64))
            buf[start : start + val.size] = val
            return
        args = [self.read(s) for s in op.srcs]
        bits = op.attr("bits")
        if k == "add":
            res = self._binary(lambda a, b: vo.add(a, b, bits), *args)
        elif k == "sub":
            res = self._binary(lambda a, b: vo.sub(a, b, bits), *args)
        elif k == "max":
            res = self._binary(vo.vmax, *args)
        elif k == "min":
            res = self._binary(vo.vmin, *args)
        elif k == "mul":
            res = vo.mul(args[0], args[1], int(args[2]), bits)
        elif k == "shift":
            res = vo.shift(args[0], int(args[1]), bits, mode=op.attr("mode", "rne"))
        elif k == "pwl_eval":
            res = vo.pwl(args[0], self.p.table(op.attr("table")))
        elif k == "find_segment":
            res = vo.leading_one(args[0], bits)
        elif k == "sum_reduce":
            res = vo.reduce_sum(args[0], bits)
        elif k == "max_reduce":
            res = vo.reduce_max(args[0])
        else:
            raise ExecutionError(f"no semantics for op kind {k!r}")
        if op.dst.file == "s":
            res = int(res)
        self.write(op.dst, res)


def execute(program: Microprogram, inputs: Mapping[str, object], cfg: NvuConfig) -> ExecutionResult:
    """Run ``program``; returns outputs (raw payloads) and the cycle count.

    Bundles issue in order, one per cycle at best.  A scoreboard delays a
    bundle until its source registers are ready and the multiplier slot is
    free; those delays are the stall cycles.
    """
    if cfg.vrwidth_bits != program.vrwidth_bits:
        raise ExecutionError(
            f"program expanded for VRWIDTH {program.vrwidth_bits}, machine has {cfg.vrwidth_bits}"
        )
    check_legality(program)
    missing = set(program.inputs) - set(inputs)
    if missing:
        raise ExecutionError(f"missing input buffers: {sorted(missing)}")
    nmem = {}
    for name in program.inputs:
        arr = _raw(inputs[name])
        if arr.shape != (program.n_elements,):
            raise ExecutionError(f"input {name!r} has {arr.size} elements, program expects {program.n_elements}")
        nmem[name] = arr
    m = _Machine(program, cfg, nmem)

    times, stalls = dynamic_issue(program.bundles, cfg)
    for b in program.bundles:
        for op in b.ordered_ops():
            m.step(op)
    t = times[-1] if times else -1
    return ExecutionResult(
        outputs={program.output: m.nmem[program.output]},
        cycles=t + 1,
        stall_cycles=stalls,
        bundles=len(program.bundles),
    )


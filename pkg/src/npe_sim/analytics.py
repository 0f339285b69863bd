"""Throughput requirements, latency/overhead reports and report files.

Requirement rows use exact rational arithmetic: the cycle budget of a
nonlinearity is the cycle count of the matmul producing its input, and its
share of the encoder is (instances x budget) / (all matmul cycles of one
encoder).
"""

from __future__ import annotations

import csv
import functools
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

from .mmu import MmuConfig
from .nvu import NvuConfig, kernel_cycle_model
from .workload import (
    DEFAULT_OVERLAP_WINDOW,
    ModelConfig,
    Node,
    Schedule,
    build_network_graph,
    matmul_cycles,
    mmu_order,
    schedule,
)

NONLINEARITIES = ("softmax", "layernorm_a", "gelu", "layernorm_b")
_ROLE = {"softmax": "softmax", "layernorm_a": "LN_A", "gelu": "GELU", "layernorm_b": "LN_B"}
DEFAULT_CLOCK_HZ = 200_000_000
BASELINE_VRWIDTH = 2048


@dataclass(frozen=True)
class RequirementRow:
    nonlinearity: str
    N: int
    M: int
    cycle_budget: int
    required_throughput: Fraction
    pct_overall_cycles: Fraction

    def as_record(self) -> dict:
        return {
            "nonlinearity": self.nonlinearity,
            "N": self.N,
            "M": self.M,
            "cycle_budget": self.cycle_budget,
            "required_throughput": _num(self.required_throughput),
            "required_throughput_exact": str(self.required_throughput),
            "pct_overall_cycles": _num(self.pct_overall_cycles),
            "pct_overall_cycles_exact": str(self.pct_overall_cycles),
        }


def _num(x, digits: int = 6) -> str:
    """Locale-independent fixed formatting with trailing zeros trimmed."""
    s = f"{float(x):.{digits}f}".rstrip("0").rstrip(".")
    return s if s not in ("", "-0") else "0"


def _one_encoder(cfg: ModelConfig):
    g = build_network_graph(ModelConfig(L=1, A=cfg.A, H=cfg.H, seq_len=cfg.seq_len, ff_dim=cfg.ff_dim))
    return g


def _producer(g, node: Node) -> Node:
    mm = [g.node(d) for d in node.deps if g.node(d).op_kind == "matmul"]
    return mm[0]


def requirements_table(cfg: ModelConfig, mults_per_cycle: int) -> list[RequirementRow]:
    return overlapped_requirements(cfg, mults_per_cycle, overlap_window=0)


def overlapped_requirements(cfg: ModelConfig, mults_per_cycle: int,
                            overlap_window: int = DEFAULT_OVERLAP_WINDOW) -> list[RequirementRow]:
    """Requirement rows with softmax's budget enlarged by the overlap window.

    The window is the MMU work hoisted between QK_i and SV_i by
    :func:`workload.mmu_order` for a head in the middle of the encoder.
    Layer norm and GELU are rate matched, so their rows do not change.
    """
    g = _one_encoder(cfg)
    total = sum(matmul_cycles(*n.dims, mults_per_cycle) for n in g.matmuls())
    order = [n.id for n in mmu_order(g, "overlap" if overlap_window else "no_overlap", overlap_window)]
    head = 0 if cfg.A == 1 else cfg.A // 2
    rows = []
    for name in NONLINEARITIES:
        nodes = g.by_role(_ROLE[name])
        node = nodes[0] if name != "softmax" else nodes[head]
        prod = _producer(g, node)
        budget = matmul_cycles(*prod.dims, mults_per_cycle)
        if name == "softmax":
            i, j = order.index(prod.id), order.index(f"e0.h{node.head_index}.SV")
            budget += sum(matmul_cycles(*g.node(x).dims, mults_per_cycle) for x in order[i + 1 : j])
        base_budget = matmul_cycles(*prod.dims, mults_per_cycle)
        n_, m_ = node.dims
        rows.append(
            RequirementRow(
                nonlinearity=name,
                N=n_,
                M=m_,
                cycle_budget=budget,
                required_throughput=Fraction(n_ * m_, budget),
                pct_overall_cycles=Fraction(100 * len(nodes) * base_budget, total),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    seq_len: int
    precision: str
    vrwidth_bits: int
    policy: str
    total_cycles: int
    stall_cycles: int
    mmu_cycles: int
    clock_hz: float
    latency_ms: float
    baseline_cycles: int
    overhead_pct: float
    stall_softmax: int
    stall_layernorm: int
    stall_gelu: int

    FIELDS = (
        "seq_len", "precision", "vrwidth_bits", "policy", "total_cycles", "stall_cycles", "mmu_cycles",
        "clock_hz", "latency_ms", "baseline_cycles", "overhead_pct", "stall_softmax", "stall_layernorm",
        "stall_gelu",
    )

    def as_record(self) -> dict:
        d = asdict(self)
        for k in ("latency_ms", "overhead_pct", "clock_hz"):
            d[k] = _num(d[k])
        return {k: d[k] for k in self.FIELDS}


def nvu_cost_model(nvu_cfg: NvuConfig):
    """Per-node NVU cycles: rows x the per-row kernel cycle count.

    Residual adds are fused into the first pass of the following layer norm,
    so ``add_residual`` nodes cost nothing on their own.
    """

    @functools.lru_cache(maxsize=None)
    def per_row(kind: str, n: int) -> int:
        if kind == "layernorm":
            return kernel_cycle_model("layernorm", n, nvu_cfg, residual=True)
        return kernel_cycle_model(kind, n, nvu_cfg)

    def cost(node: Node) -> int:
        if node.op_kind == "add_residual":
            return 0
        rows, width = node.dims
        return rows * per_row(node.op_kind, width)

    return cost


@functools.lru_cache(maxsize=256)
def _schedule(cfg: ModelConfig, mults_per_cycle: int, nvu_cfg: NvuConfig, policy: str, window: int) -> Schedule:
    return schedule(build_network_graph(cfg), nvu_cost_model(nvu_cfg), policy, mults_per_cycle, window)


def latency_report(cfg: ModelConfig, mmu_cfg: MmuConfig, nvu_cfg: NvuConfig, policy: str = "overlap",
                   clock_hz: float = DEFAULT_CLOCK_HZ, overlap_window: int = DEFAULT_OVERLAP_WINDOW) -> LatencyReport:
    if clock_hz <= 0:
        raise ValueError("clock_hz must be positive")
    s = _schedule(cfg, mmu_cfg.mults_per_cycle, nvu_cfg, policy, overlap_window)
    base_cfg = NvuConfig(BASELINE_VRWIDTH, timing=nvu_cfg.timing)
    b = _schedule(cfg, mmu_cfg.mults_per_cycle, base_cfg, policy, overlap_window)
    overhead = max(0.0, 100.0 * (s.total_cycles - b.total_cycles) / b.total_cycles)
    return LatencyReport(
        seq_len=cfg.seq_len,
        precision=mmu_cfg.precision,
        vrwidth_bits=nvu_cfg.vrwidth_bits,
        policy=policy,
        total_cycles=s.total_cycles,
        stall_cycles=s.stall_cycles,
        mmu_cycles=s.mmu_cycles,
        clock_hz=float(clock_hz),
        latency_ms=s.total_cycles / clock_hz * 1000.0,
        baseline_cycles=b.total_cycles,
        overhead_pct=overhead,
        stall_softmax=s.stall_by_kind.get("softmax", 0),
        stall_layernorm=s.stall_by_kind.get("layernorm", 0),
        stall_gelu=s.stall_by_kind.get("gelu", 0),
    )


def latency_schedule(cfg: ModelConfig, mmu_cfg: MmuConfig, nvu_cfg: NvuConfig, policy: str = "overlap",
                     overlap_window: int = DEFAULT_OVERLAP_WINDOW) -> Schedule:
    return _schedule(cfg, mmu_cfg.mults_per_cycle, nvu_cfg, policy, overlap_window)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

Record = Union[RequirementRow, LatencyReport, dict]


def _records(items: Sequence[Record]) -> list[dict]:
    out = []
    for it in items:
        out.append(it if isinstance(it, dict) else it.as_record())
    return out


def render_report(items: Sequence[Record], fmt: str) -> str:
    recs = _records(items)
    if fmt == "json":
        return json.dumps(recs, indent=2, sort_keys=False, ensure_ascii=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        if recs:
            w = csv.DictWriter(buf, fieldnames=list(recs[0].keys()), lineterminator="\n")
            w.writeheader()
            w.writerows(recs)
        return buf.getvalue()
    raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")


def atomic_write(path: Union[str, Path], text: str) -> Path:
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    if not directory.is_dir():
        raise OSError(f"destination directory {directory} does not exist")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def emit_report(items: Sequence[Record], path: Union[str, Path], fmt: Optional[str] = None) -> Path:
    """Write records as CSV or JSON (inferred from the suffix if ``fmt`` is None)."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    return atomic_write(path, render_report(items, fmt))


def read_report_csv(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))

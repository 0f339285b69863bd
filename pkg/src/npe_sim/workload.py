"""BERT encoder computation graph and the MMU/NVU schedule.

The graph follows the encoder dataflow: per-head Q/K/V projections, scaled
scores, softmax, the softmax-V product, output projection, residual +
layer norm, the feed-forward pair with GELU, and the second residual +
layer norm.  Bias adds and the 1/k score scaling are folded into the MMU
output stage and do not appear as nodes.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional

MMU_KINDS = ("matmul",)
NVU_KINDS = ("softmax", "layernorm", "gelu", "add_residual")
OP_KINDS = MMU_KINDS + NVU_KINDS
POLICIES = ("no_overlap", "overlap")
DEFAULT_OVERLAP_WINDOW = 3


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    L: int = 12
    A: int = 12
    H: int = 768
    seq_len: int = 512
    ff_dim: Optional[int] = None

    def __post_init__(self):
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", 4 * self.H)
        for name in ("L", "A", "H", "ff_dim"):
            if getattr(self, name) < 1:
                raise WorkloadError(f"{name} must be positive")
        if self.H % self.A:
            raise WorkloadError(f"H={self.H} is not divisible by A={self.A}")
        if not 1 <= self.seq_len <= 512:
            raise WorkloadError(f"seq_len must be in [1, 512], got {self.seq_len}")

    @property
    def head_dim(self) -> int:
        return self.H // self.A


@dataclass(frozen=True)
class Node:
    id: str
    op_kind: str
    dims: tuple
    deps: tuple
    role: str
    encoder: int = 0
    head_index: Optional[int] = None

    @property
    def multiplies(self) -> int:
        if self.op_kind != "matmul":
            return 0
        n, m, k = self.dims
        return n * m * k

    @property
    def elements(self) -> int:
        return self.dims[0] * self.dims[1]


@dataclass(frozen=True)
class WorkloadGraph:
    cfg: ModelConfig
    nodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "_index", {n.id: n for n in self.nodes})

    def node(self, node_id: str) -> Node:
        return self._index[node_id]

    def by_role(self, role: str, encoder: Optional[int] = None) -> list[Node]:
        return [n for n in self.nodes if n.role == role and (encoder is None or n.encoder == encoder)]

    def matmuls(self) -> list[Node]:
        return [n for n in self.nodes if n.op_kind == "matmul"]

    def topological_order(self) -> list[Node]:
        indeg = {n.id: len(n.deps) for n in self.nodes}
        users = defaultdict(list)
        for n in self.nodes:
            for d in n.deps:
                if d not in self._index:
                    raise WorkloadError(f"node {n.id} depends on unknown node {d}")
                users[d].append(n.id)
        ready = [n.id for n in self.nodes if indeg[n.id] == 0]
        out = []
        while ready:
            nid = ready.pop()
            out.append(self._index[nid])
            for u in users[nid]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    ready.append(u)
        if len(out) != len(self.nodes):
            raise WorkloadError("workload graph has a cycle")
        return out


def build_encoder_graph(cfg: ModelConfig, encoder: int = 0, input_dep: Optional[str] = None) -> list[Node]:
    """Nodes of one encoder; ``input_dep`` is the node producing its input X."""
    S, H, F, dh = cfg.seq_len, cfg.H, cfg.ff_dim, cfg.head_dim
    p = f"e{encoder}."
    x_dep = (input_dep,) if input_dep else ()
    nodes = []

    def add(role, kind, dims, deps, head=None):
        nid = p + (f"h{head}." if head is not None else "") + role
        nodes.append(Node(nid, kind, dims, tuple(deps), role, encoder, head))
        return nid

    sv = []
    for h in range(cfg.A):
        q = add("Q", "matmul", (S, dh, H), x_dep, h)
        k = add("K", "matmul", (S, dh, H), x_dep, h)
        v = add("V", "matmul", (S, dh, H), x_dep, h)
        qk = add("QK", "matmul", (S, S, dh), (q, k), h)
        sm = add("softmax", "softmax", (S, S), (qk,), h)
        sv.append(add("SV", "matmul", (S, dh, S), (sm, v), h))
    wo = add("WO", "matmul", (S, H, H), sv)
    ra = add("residual_A", "add_residual", (S, H), (wo,) + x_dep)
    lna = add("LN_A", "layernorm", (S, H), (wo, ra))
    ff1 = add("FF1", "matmul", (S, F, H), (lna,))
    g = add("GELU", "gelu", (S, F), (ff1,))
    ff2 = add("FF2", "matmul", (S, H, F), (g,))
    rb = add("residual_B", "add_residual", (S, H), (ff2, lna))
    add("LN_B", "layernorm", (S, H), (ff2, rb))
    return nodes


def build_network_graph(cfg: ModelConfig) -> WorkloadGraph:
    nodes: list[Node] = []
    prev = None
    for e in range(cfg.L):
        enc = build_encoder_graph(cfg, e, prev)
        nodes += enc
        prev = enc[-1].id
    g = WorkloadGraph(cfg, tuple(nodes))
    g.topological_order()
    return g


def matmul_cycles(N: int, M: int, K: int, mults_per_cycle: int) -> int:
    if min(N, M, K, mults_per_cycle) < 1:
        raise WorkloadError("matmul dimensions and mults_per_cycle must be positive")
    return -(-(N * M * K) // mults_per_cycle)


def mmu_order(graph: WorkloadGraph, policy: str, overlap_window: int = DEFAULT_OVERLAP_WINDOW) -> list[Node]:
    """Issue order of matmuls.

    Without overlap each head runs Q, K, V, QK, SV.  With overlap, after QK_i
    the next ``overlap_window`` projections (V_i, then head i+1's Q, K, V, ...)
    are hoisted ahead of SV_i so the MMU keeps working while softmax_i runs.
    """
    if policy not in POLICIES:
        raise WorkloadError(f"policy must be one of {POLICIES}, got {policy!r}")
    if overlap_window < 0:
        raise WorkloadError("overlap_window must be non-negative")
    window = overlap_window if policy == "overlap" else 0
    order: list[Node] = []
    for e in range(graph.cfg.L):
        proj = [graph.node(f"e{e}.h{h}.{r}") for h in range(graph.cfg.A) for r in ("Q", "K", "V")]
        done: set[str] = set()
        pos = 0

        def emit_until(target: str):
            nonlocal pos
            while target not in done:
                order.append(proj[pos])
                done.add(proj[pos].id)
                pos += 1

        for h in range(graph.cfg.A):
            pre = f"e{e}.h{h}."
            emit_until(pre + "K")
            if window == 0:
                emit_until(pre + "V")
            order.append(graph.node(pre + "QK"))
            for _ in range(window):
                if pos < len(proj):
                    emit_until(proj[pos].id)
            emit_until(pre + "V")
            order.append(graph.node(pre + "SV"))
        order += [graph.node(f"e{e}.{r}") for r in ("WO", "FF1", "FF2")]
    return order


@dataclass(frozen=True)
class ScheduleEntry:
    node_id: str
    unit: str
    start_cycle: int
    end_cycle: int


@dataclass(frozen=True)
class Schedule:
    entries: tuple
    total_cycles: int
    stall_cycles: int
    mmu_cycles: int
    stall_by_kind: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "unit", "start", "end"])
        for e in self.entries:
            w.writerow([e.node_id, e.unit, e.start_cycle, e.end_cycle])
        return buf.getvalue()


NvuCostFn = Callable[[Node], int]


def schedule(graph: WorkloadGraph, nvu_cycle_model: NvuCostFn, policy: str = "overlap",
             mults_per_cycle: int = 2048, overlap_window: int = DEFAULT_OVERLAP_WINDOW,
             weight_bytes_per_cycle: Optional[float] = None, weight_bytes_per_element: int = 2) -> Schedule:
    """List-schedule the graph on one MMU and one NVU.

    ``overlap``: each nonlinear node streams with its producing matmul (it
    may start when the producer starts and cannot finish before it), and the
    matmuls that consume it wait for it to finish.  Softmax additionally has
    the hoisted projections of :func:`mmu_order` as slack.  ``no_overlap``:
    a nonlinear node starts only after its producer has finished.

    ``weight_bytes_per_cycle`` enables the bandwidth-limited memory mode, in
    which a matmul lasts at least as long as streaming its weight operand.
    """
    order = mmu_order(graph, policy, overlap_window)
    mm_cycles = {}
    for n in order:
        c = matmul_cycles(*n.dims, mults_per_cycle)
        if weight_bytes_per_cycle and n.role not in ("QK", "SV"):
            c = max(c, math.ceil(n.dims[1] * n.dims[2] * weight_bytes_per_element / weight_bytes_per_cycle))
        mm_cycles[n.id] = c

    users = defaultdict(list)
    for n in graph.nodes:
        for d in n.deps:
            users[d].append(n)

    start: dict[str, int] = {}
    end: dict[str, int] = {}
    entries = []
    mmu_free = nvu_free = 0
    stall_by_kind: dict[str, int] = defaultdict(int)
    pending_nvu: list[Node] = []

    def run_nvu(node: Node):
        nonlocal nvu_free
        cost = int(nvu_cycle_model(node))
        if cost < 0:
            raise WorkloadError(f"negative NVU cost for {node.id}")
        producers = [graph.node(d) for d in node.deps]
        prod_end = max((end[p.id] for p in producers), default=0)
        if policy == "overlap":
            s = max([nvu_free] + [start[p.id] for p in producers])
        else:
            s = max(nvu_free, prod_end)
        e = max(s + cost, prod_end)
        start[node.id], end[node.id] = s, e
        nvu_free = s + cost if cost else nvu_free
        entries.append(ScheduleEntry(node.id, "NVU", s, e))

    def flush_ready():
        # run every NVU node whose dependencies are all done, in graph order
        progressed = True
        while progressed:
            progressed = False
            for node in list(pending_nvu):
                if all(d in end for d in node.deps):
                    pending_nvu.remove(node)
                    run_nvu(node)
                    progressed = True

    pending_nvu.extend(n for n in graph.nodes if n.op_kind != "matmul")
    for n in order:
        flush_ready()
        missing = [d for d in n.deps if d not in end]
        if missing:
            raise WorkloadError(f"MMU order places {n.id} before its dependency {missing[0]}")
        ready = max((end[d] for d in n.deps), default=0)
        s = max(mmu_free, ready)
        if s > mmu_free:
            blocker = max(n.deps, key=lambda d: end[d])
            stall_by_kind[graph.node(blocker).op_kind] += s - mmu_free
        start[n.id], end[n.id] = s, s + mm_cycles[n.id]
        mmu_free = end[n.id]
        entries.append(ScheduleEntry(n.id, "MMU", s, end[n.id]))
    flush_ready()
    if pending_nvu:
        raise WorkloadError("unschedulable nodes: " + ", ".join(x.id for x in pending_nvu))

    total = max(end.values())
    mmu_total = sum(mm_cycles.values())
    if total > mmu_free:
        last = max(end, key=lambda k: end[k])
        stall_by_kind[graph.node(last).op_kind] += total - mmu_free
    entries.sort(key=lambda x: (x.start_cycle, x.unit, x.node_id))
    return Schedule(tuple(entries), total, total - mmu_total, mmu_total, dict(stall_by_kind))

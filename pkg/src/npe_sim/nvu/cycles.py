"""Closed-form NVU cycle model.

With the calibrated default timing every kernel costs a per-vector term
(set by its busiest unit: the table/multiplier slot or the LSU) plus, for
the reducing kernels, two reduction latencies and a fixed scalar phase::

    gelu        4V
    vector_add  3V
    softmax     9V  + 2*R + 5
    layernorm   21V + 2*R + 13
    layernorm   22V + 2*R + 14 - [V == 1]   (residual fused)

where ``V = ceil(n / lanes)`` and ``R = ceil(log2(min(n, lanes))) + 1``.
Any other timing configuration falls back to packing the trace, which still needs no
functional simulation.
"""

from __future__ import annotations

import functools

from .. import nonlinear as nl
from .config import NvuConfig, NvuTiming
from .expand import ExpansionError, scheduled_cycles
from .isa import KERNELS

_DEFAULT_TIMING = NvuTiming()


def kernel_cycle_model(kernel: str, n_elements: int, cfg: NvuConfig, residual: bool = False,
                       ncfg: nl.NonlinearConfig = nl.DEFAULT_CONFIG) -> int:
    if kernel not in KERNELS:
        raise ExpansionError(f"unsupported kernel {kernel!r}; expected one of {KERNELS}")
    if n_elements < 0:
        raise ExpansionError("n_elements must be non-negative")
    if n_elements == 0:
        return 0
    if cfg.timing != _DEFAULT_TIMING:
        return _packed(kernel, n_elements, cfg, residual, ncfg)
    v = -(-n_elements // cfg.lanes)
    r = cfg.reduce_latency_for(n_elements)
    if kernel == "gelu":
        return 4 * v
    if kernel == "vector_add":
        return 3 * v
    if kernel == "softmax":
        return 9 * v + 2 * r + 5
    if residual:
        return 22 * v + 2 * r + 14 - (v == 1)
    return 21 * v + 2 * r + 13


@functools.lru_cache(maxsize=4096)
def _packed(kernel, n, cfg, residual, ncfg) -> int:
    return scheduled_cycles(kernel, n, cfg, ncfg, residual)

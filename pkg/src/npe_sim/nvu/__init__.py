"""Nonlinear vector unit: VLIW microprograms, execution and cycle models."""

from .config import NvuConfig, NvuTiming, VALID_WIDTHS
from .cycles import kernel_cycle_model
from .expand import ExpansionError, expand_microprogram, scheduled_cycles
from .isa import KERNELS, Imm, Microprogram, Op, Reg, VliwBundle
from .machine import ExecutionError, ExecutionResult, check_legality, execute

__all__ = [
    "KERNELS",
    "VALID_WIDTHS",
    "ExecutionError",
    "ExecutionResult",
    "ExpansionError",
    "Imm",
    "Microprogram",
    "NvuConfig",
    "NvuTiming",
    "Op",
    "Reg",
    "VliwBundle",
    "check_legality",
    "execute",
    "expand_microprogram",
    "kernel_cycle_model",
    "scheduled_cycles",
]

"""NVU configuration and the single block of timing constants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

VALID_WIDTHS = (256, 512, 1024, 2048)
ELEMENT_BITS = 16


@dataclass(frozen=True)
class NvuTiming:
    """Calibration constants of the pipeline model.

    Vector ops chain: a consumer may issue in the last occupancy cycle of its
    producer.  The multiplier slot has ``VRWIDTH/32`` DSP multipliers, so one
    16x16 partial product over a full register takes
    ``mul_cycles_per_partial_product`` cycles; wider operands take one pass
    per 16-bit partial product.  ALU ops take one cycle at any precision.
    Reductions deliver to the SRF after ``log2(lanes) + reduce_extra``
    cycles; scalar ops have the fixed latencies below.
    """

    mul_cycles_per_partial_product: int = 2
    pwl_partial_products: int = 2
    reduce_extra: int = 1
    scu_add: int = 1
    scu_shift: int = 1
    scu_find_segment: int = 1
    scu_mul: int = 2
    scu_pwl: int = 3
    lookahead: int = 8

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"timing constant {name} must be a positive integer, got {v!r}")

    def scu_latency(self, kind: str) -> int:
        return {
            "add": self.scu_add,
            "sub": self.scu_add,
            "max": self.scu_add,
            "min": self.scu_add,
            "compare": self.scu_add,
            "shift": self.scu_shift,
            "find_segment": self.scu_find_segment,
            "mul": self.scu_mul,
            "pwl_eval": self.scu_pwl,
        }[kind]


@dataclass(frozen=True)
class NvuConfig:
    vrwidth_bits: int = 1024
    vrf_registers: int = 32
    srf_registers: int = 32
    vcu_issue_slots: int = 3
    timing: NvuTiming = field(default_factory=NvuTiming)

    def __post_init__(self):
        if self.vrwidth_bits not in VALID_WIDTHS:
            raise ValueError(f"vrwidth_bits must be one of {VALID_WIDTHS}, got {self.vrwidth_bits}")
        if self.vrf_registers != 32:
            raise ValueError("the NVU has exactly 32 vector registers")
        if self.vcu_issue_slots != 3:
            raise ValueError("the VCU issues exactly 3 operations per bundle")
        if self.srf_registers < 8:
            raise ValueError("srf_registers must be at least 8")

    def elements_per_register(self, element_bits: int = ELEMENT_BITS) -> int:
        if element_bits not in (8, 16, 32, 64):
            raise ValueError(f"unsupported element width {element_bits}")
        return self.vrwidth_bits // element_bits

    @property
    def lanes(self) -> int:
        """16-bit lanes per register, the unit of vector work."""
        return self.elements_per_register(ELEMENT_BITS)

    @property
    def reduce_latency(self) -> int:
        return self.reduce_latency_for(self.lanes)

    def reduce_latency_for(self, active: int) -> int:
        """Tree depth over the lanes a reduction actually combines, plus the SRF write."""
        return math.ceil(math.log2(max(1, min(active, self.lanes)))) + self.timing.reduce_extra

    def mul_occupancy(self, bits_a: int, bits_b: int) -> int:
        pp = math.ceil(bits_a / 16) * math.ceil(bits_b / 16)
        return pp * self.timing.mul_cycles_per_partial_product

    @property
    def pwl_occupancy(self) -> int:
        return self.timing.pwl_partial_products * self.timing.mul_cycles_per_partial_product

"""Bit-accurate, cycle-level model of a transformer overlay processor.

The package covers fixed-point arithmetic, piecewise-linear function tables,
the nonlinear kernels built on them, the NVU microprogram model, the MMU, the
BERT workload schedule and the analytic reports derived from it.
"""

__version__ = "0.1.0"

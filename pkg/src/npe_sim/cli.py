"""``npe-sim`` command line: segment, simulate, accuracy, sweep, report.

Exit codes: 0 when every requested check passes, 1 when a check fails,
2 for usage or configuration errors.  Every command writes a
``<command>_summary.json`` next to its reports.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import analytics as an
from . import nonlinear as nl
from .approx import SegmentationError, certify_error, dumps_table, segment_function
from .config import ConfigError, ExperimentConfig, load_config
from .fixedpoint import FixedPointError, fmt
from .nvu import KERNELS, kernel_cycle_model
from .reference import accuracy_trial

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# name -> (function, default interval, input format, output format, range policy)
FUNCTIONS: dict[str, tuple[Callable, tuple[float, float], str, str, str]] = {
    "identity": (lambda x: np.asarray(x, dtype=np.float64), (-8.0, 8.0), "Q5.11@16", "Q5.11@16", "extrapolate_last_segment"),
    "gelu": (nl.gelu_exact, (-8.0, 8.0), "Q5.11@16", "Q5.11@16", "extrapolate_last_segment"),
    "exp": (np.exp, (-16.0, 0.0), "Q6.10@16", "Q1.15@16", "clamp"),
    "recip": (lambda x: 1.0 / x, (1.0, 2.0), "Q2.14@16", "Q2.30@32", "clamp"),
    "rsqrt": (lambda x: 1.0 / np.sqrt(x), (1.0, 4.0), "Q3.13@16", "Q2.30@32", "clamp"),
    "tanh": (np.tanh, (-4.0, 4.0), "Q4.12@16", "Q1.15@16", "clamp"),
    "sigmoid": (lambda x: 1.0 / (1.0 + np.exp(-x)), (-8.0, 8.0), "Q5.11@16", "Q1.15@16", "clamp"),
}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> Path:
    return an.atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args, cfg: Optional[ExperimentConfig]) -> Path:
    d = Path(args.out_dir or (cfg.outputs.out_dir if cfg else "out"))
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {d}: {exc.strerror}") from None
    return d


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        updates["seed"] = args.seed
    if args.format is not None:
        updates["outputs"] = cfg.outputs.model_copy(update={"format": args.format})
    return cfg.model_copy(update=updates) if updates else cfg


def _fmt(args, cfg: Optional[ExperimentConfig]) -> str:
    return args.format or (cfg.outputs.format if cfg else "csv")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_segment(args) -> int:
    if args.function not in FUNCTIONS:
        raise UsageError(f"unknown function {args.function!r}; choose from {sorted(FUNCTIONS)}")
    f, interval, in_f, out_f, policy = FUNCTIONS[args.function]
    lo, hi = args.interval if args.interval else interval
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
        raise UsageError(f"--interval needs lo < hi, got {lo} {hi}")
    if args.segments is not None and args.target_error is not None:
        raise UsageError("give at most one of --segments and --target-error")
    if args.segments is not None and args.segments < 1:
        raise UsageError("--segments must be positive")
    try:
        in_fmt = fmt(args.input_fmt or in_f)
        out_fmt = fmt(args.output_fmt or out_f)
    except FixedPointError as exc:
        raise UsageError(str(exc)) from None
    if lo < in_fmt.min_value or hi > in_fmt.max_value + in_fmt.ulp:
        raise UsageError(f"interval [{lo}, {hi}] exceeds the range of input format {in_fmt}")

    out = _out_dir(args, None)
    summary = {"command": "segment", "function": args.function, "interval": [lo, hi],
               "input_fmt": str(in_fmt), "output_fmt": str(out_fmt)}
    budget = {"max_segments": args.segments if args.segments else (None if args.target_error else 16),
              "target_max_error": args.target_error}
    try:
        table = segment_function(f, (lo, hi), input_fmt=in_fmt, output_fmt=out_fmt,
                                 range_policy=policy, name=args.function, **budget)
    except SegmentationError as exc:
        summary.update(status="fail", error=str(exc))
        _write_json(out / f"{args.function}.segment_summary.json", summary)
        print(f"segment: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rep = certify_error(table, f)
    an.atomic_write(out / f"{args.function}.table.json", dumps_table(table))
    err = {"function": args.function, "segments": table.segments, "max_abs_error": rep.max_abs_error,
           "max_rel_error": rep.max_rel_error, "argmax_point": rep.argmax_point,
           "grid_points": rep.grid_points, "output_ulp": out_fmt.ulp,
           "max_abs_error_ulps": rep.max_abs_error / out_fmt.ulp}
    _write_json(out / f"{args.function}.error.json", err)
    summary.update(status="pass", segments=table.segments, max_abs_error=rep.max_abs_error)
    _write_json(out / f"{args.function}.segment_summary.json", summary)
    print(f"{args.function}: {table.segments} segments, max abs error {rep.max_abs_error:.3e}")
    return EXIT_OK


def _kernel_rows(cfg: ExperimentConfig) -> list[dict]:
    m = cfg.model_cfg()
    ncfg = cfg.nvu_cfg()
    rows = []
    for kernel, n, residual in (("softmax", m.seq_len, False), ("layernorm", m.H, True), ("gelu", m.ff_dim, False)):
        c = kernel_cycle_model(kernel, n, ncfg, residual=residual)
        rows.append({"kernel": kernel, "n_elements": n, "vrwidth_bits": ncfg.vrwidth_bits,
                     "residual_fused": residual, "cycles": c, "elements_per_cycle": an._num(n / c)})
    return rows


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    f = _fmt(args, cfg)
    rep = an.latency_report(cfg.model_cfg(), cfg.mmu_cfg(), cfg.nvu_cfg(), cfg.policy, cfg.clock_hz,
                            cfg.overlap_window)
    an.emit_report([rep], out / f"simulate_latency.{f}", f)
    an.emit_report(_kernel_rows(cfg), out / f"simulate_kernels.{f}", f)
    _write_json(out / "simulate_summary.json", {"command": "simulate", "status": "pass",
                                                "config": json.loads(cfg.dumps()), "latency": rep.as_record()})
    print(f"seq {rep.seq_len} {rep.precision} NVU-{rep.vrwidth_bits}: {rep.total_cycles} cycles, "
          f"{rep.latency_ms:.3f} ms, overhead {rep.overhead_pct:.2f}%")
    return EXIT_OK


def cmd_accuracy(args) -> int:
    cfg = _load(args)
    if args.trials is not None:
        if args.trials < 1:
            raise UsageError("--trials must be at least 1")
        cfg = cfg.model_copy(update={"accuracy": cfg.accuracy.model_copy(update={"trials": args.trials})})
    out = _out_dir(args, cfg)
    f = _fmt(args, cfg)
    acc = cfg.accuracy
    model = cfg.model_cfg(acc.seq_len)
    ncfg = cfg.nonlinear_cfg()
    rows, worst = [], {"max_abs": 0.0, "mean_abs": 0.0}
    for i in range(acc.trials):
        seed = cfg.seed + i
        m = accuracy_trial(model, seed, ncfg, acc.weight_scale)
        rows.append({"trial": i, "seed": seed, "max_abs": an._num(m.max_abs, 9),
                     "mean_abs": an._num(m.mean_abs, 9), "max_rel": an._num(m.max_rel, 9),
                     "argmax_row": m.argmax[0], "argmax_col": m.argmax[1]})
        worst["max_abs"] = max(worst["max_abs"], m.max_abs)
        worst["mean_abs"] = max(worst["mean_abs"], m.mean_abs)
    limits = acc.thresholds.model_dump()
    failed = sorted(k for k in limits if worst[k] > limits[k])
    an.emit_report(rows, out / f"accuracy_trials.{f}", f)
    summary = {"command": "accuracy", "status": "fail" if failed else "pass", "trials": acc.trials,
               "seq_len": acc.seq_len, "budgets": cfg.budgets.model_dump(), "worst": worst,
               "thresholds": limits, "failed_thresholds": failed}
    _write_json(out / "accuracy_summary.json", summary)
    for k in sorted(limits):
        state = "FAIL" if k in failed else "ok"
        print(f"{k}: worst {worst[k]:.6g} threshold {limits[k]:.6g} {state}")
    return EXIT_FAIL if failed else EXIT_OK


def _sweep_point(cfg: ExperimentConfig, width: int, seq: int) -> an.LatencyReport:
    return an.latency_report(cfg.model_cfg(seq), cfg.mmu_cfg(), cfg.nvu_cfg(width), cfg.policy, cfg.clock_hz,
                             cfg.overlap_window)


def sweep_reports(cfg: ExperimentConfig, jobs: int = 1) -> list[an.LatencyReport]:
    points = [(w, s) for s in cfg.sweep.seq_lens for w in cfg.sweep.widths]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_sweep_point, [cfg] * len(points), *zip(*points)))
    return [_sweep_point(cfg, w, s) for w, s in points]


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    out = _out_dir(args, cfg)
    f = _fmt(args, cfg)
    reps = sweep_reports(cfg, args.jobs)
    an.emit_report(reps, out / f"sweep.{f}", f)
    _write_json(out / "sweep_summary.json", {"command": "sweep", "status": "pass", "rows": len(reps),
                                             "widths": cfg.sweep.widths, "seq_lens": cfg.sweep.seq_lens})
    for r in reps:
        print(f"seq {r.seq_len:4d} NVU-{r.vrwidth_bits:<5d} overhead {r.overhead_pct:7.2f}%  {r.latency_ms:.3f} ms")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    f = _fmt(args, cfg)
    mpc = cfg.mmu_cfg().mults_per_cycle
    base, over = [], []
    for s in cfg.sweep.seq_lens:
        for r in an.requirements_table(cfg.model_cfg(s), mpc):
            base.append({"seq_len": s, **r.as_record()})
        for r in an.overlapped_requirements(cfg.model_cfg(s), mpc, cfg.overlap_window):
            over.append({"seq_len": s, **r.as_record()})
    an.emit_report(base, out / f"requirements.{f}", f)
    an.emit_report(over, out / f"overlapped_requirements.{f}", f)
    kern = []
    for kernel in KERNELS:
        if kernel == "vector_add":
            continue
        for w in cfg.sweep.widths:
            c = kernel_cycle_model(kernel, 512, cfg.nvu_cfg(w))
            kern.append({"kernel": kernel, "n_elements": 512, "vrwidth_bits": w, "cycles": c})
    an.emit_report(kern, out / f"kernel_cycles.{f}", f)
    _write_json(out / "report_summary.json", {"command": "report", "status": "pass",
                                              "files": [f"requirements.{f}", f"overlapped_requirements.{f}",
                                                        f"kernel_cycles.{f}"]})
    for r in base:
        print(f"seq {r['seq_len']:4d} {r['nonlinearity']:12s} budget {r['cycle_budget']:7d}  "
              f"{r['required_throughput']:>9s} el/cycle  {r['pct_overall_cycles']:>5s}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out-dir", help="directory for reports (overrides the config)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--format", choices=("csv", "json"), help="report format")

    p = argparse.ArgumentParser(prog="npe-sim", description="Overlay processor performance and accuracy model")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("segment", parents=[common], help="build a piecewise-linear table")
    s.add_argument("function", help=f"one of {', '.join(sorted(FUNCTIONS))}")
    s.add_argument("--interval", nargs=2, type=float, metavar=("LO", "HI"))
    s.add_argument("--segments", type=int, help="segment budget (default 16)")
    s.add_argument("--target-error", type=float, help="grow segments until this max error is met")
    s.add_argument("--input-fmt", help="input format, e.g. Q5.11@16")
    s.add_argument("--output-fmt", help="output format, e.g. Q5.11@16")
    s.set_defaults(func=cmd_segment)

    sub.add_parser("simulate", parents=[common], help="end-to-end latency of one configuration").set_defaults(
        func=cmd_simulate)

    a = sub.add_parser("accuracy", parents=[common], help="fixed point vs reference encoder")
    a.add_argument("--trials", type=int, help="override the number of seeded trials")
    a.set_defaults(func=cmd_accuracy)

    w = sub.add_parser("sweep", parents=[common], help="overhead over NVU widths x sequence lengths")
    w.add_argument("--jobs", type=int, default=1, help="worker processes")
    w.set_defaults(func=cmd_sweep)

    sub.add_parser("report", parents=[common], help="requirement and kernel-cycle tables").set_defaults(
        func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        for loc, msg in exc.errors:
            print(f"config error: {loc}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

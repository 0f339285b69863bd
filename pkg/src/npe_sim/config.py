"""Experiment configuration: one JSON document validated field by field."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import nonlinear as nl
from .mmu import MmuConfig
from .nvu import VALID_WIDTHS, NvuConfig
from .workload import DEFAULT_OVERLAP_WINDOW, ModelConfig, WorkloadError


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in errors))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Section):
    L: int = Field(12, ge=1)
    A: int = Field(12, ge=1)
    H: int = Field(768, ge=1)
    seq_len: int = Field(128, ge=1, le=512)
    ff_dim: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.H % self.A:
            raise ValueError(f"H={self.H} is not divisible by A={self.A}")
        return self


class MmuSection(_Section):
    precision: Literal["int8", "int16"] = "int16"
    pe_count: int = Field(128, ge=1)
    macs_per_pe: int = Field(16, ge=1)


class NvuSection(_Section):
    vrwidth_bits: Literal[256, 512, 1024, 2048] = 1024


class BudgetSection(_Section):
    exp: int = Field(32, ge=1, le=256)
    recip: int = Field(64, ge=1, le=256)
    rsqrt: int = Field(16, ge=1, le=256)
    gelu: int = Field(16, ge=1, le=256)


class Thresholds(_Section):
    max_abs: float = Field(0.03, gt=0)
    mean_abs: float = Field(0.005, gt=0)


class AccuracySection(_Section):
    trials: int = Field(20, ge=1)
    seq_len: int = Field(64, ge=1, le=512)
    weight_scale: float = Field(0.02, gt=0)
    thresholds: Thresholds = Thresholds()


class SweepSection(_Section):
    widths: list[Literal[256, 512, 1024, 2048]] = Field(default_factory=lambda: list(VALID_WIDTHS), min_length=1)
    seq_lens: list[int] = Field(default_factory=lambda: [64, 128, 256, 512], min_length=1)

    @model_validator(mode="after")
    def _seq_range(self):
        bad = [s for s in self.seq_lens if not 1 <= s <= 512]
        if bad:
            raise ValueError(f"seq_lens must lie in [1, 512], got {bad}")
        return self


class OutputSection(_Section):
    out_dir: str = "out"
    format: Literal["csv", "json"] = "csv"


class ExperimentConfig(_Section):
    model: ModelSection = ModelSection()
    mmu: MmuSection = MmuSection()
    nvu: NvuSection = NvuSection()
    policy: Literal["overlap", "no_overlap"] = "overlap"
    clock_hz: float = Field(200e6, gt=0)
    overlap_window: int = Field(DEFAULT_OVERLAP_WINDOW, ge=0)
    budgets: BudgetSection = BudgetSection()
    accuracy: AccuracySection = AccuracySection()
    sweep: SweepSection = SweepSection()
    outputs: OutputSection = OutputSection()
    seed: int = Field(0, ge=0)

    def model_cfg(self, seq_len: Optional[int] = None) -> ModelConfig:
        m = self.model
        return ModelConfig(L=m.L, A=m.A, H=m.H, seq_len=seq_len or m.seq_len, ff_dim=m.ff_dim)

    def mmu_cfg(self) -> MmuConfig:
        return MmuConfig(pe_count=self.mmu.pe_count, macs_per_pe=self.mmu.macs_per_pe, precision=self.mmu.precision)

    def nvu_cfg(self, vrwidth_bits: Optional[int] = None) -> NvuConfig:
        return NvuConfig(vrwidth_bits or self.nvu.vrwidth_bits)

    def nonlinear_cfg(self) -> nl.NonlinearConfig:
        b = self.budgets
        return dataclasses.replace(nl.DEFAULT_CONFIG, budgets=nl.TableBudgets(b.exp, b.recip, b.rsqrt, b.gelu))

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _errors(exc: ValidationError) -> list[tuple[str, str]]:
    return [(".".join(str(p) for p in e["loc"]) or "<root>", e["msg"]) for e in exc.errors()]


def parse_config(data: Union[dict, str]) -> ExperimentConfig:
    """Validate a config given as a dict or JSON text."""
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ConfigError([("<root>", f"malformed JSON: {exc.msg} (line {exc.lineno})")]) from None
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a JSON object")])
    try:
        cfg = ExperimentConfig.model_validate(data)
        cfg.model_cfg()
    except ValidationError as exc:
        raise ConfigError(_errors(exc)) from None
    except WorkloadError as exc:
        raise ConfigError([("model", str(exc))]) from None
    return cfg


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([("<file>", f"cannot read {path}: {exc.strerror}")]) from None
    return parse_config(text)

# laaf/services/config.py
"""Run configuration.

Machine settings come from the environment (a local .env is honoured):

* `LAAF_OUT_DIR`: default artifact directory (default `out`)
* `LAAF_LOG_LEVEL`: root log level for the CLI (default `INFO`)
* `LAAF_PROGRESS`: `0` disables progress bars (they are off anyway when stderr is not a terminal)

Experiment settings come from a TOML file with the sections [run], [network],
[optimizer], [objective], [problem] and [dynamics]; see config/example.toml.
Unknown keys are rejected. Command-line flags override file values.
"""
from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Annotated, Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..errors import ConfigError
from .network import Nonlinearity, SlopeMode
from .optimize import OptimizerKind

load_dotenv()

OUT_DIR = os.getenv("LAAF_OUT_DIR", "out")
LOG_LEVEL = os.getenv("LAAF_LOG_LEVEL", "INFO")
PROGRESS = os.getenv("LAAF_PROGRESS", "1").lower() not in ("0", "false", "no") and sys.stderr.isatty()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunSection(_Section):
    preset: str = "discontinuous"
    seeds: list[Annotated[int, Field(ge=0)]] = Field(default_factory=lambda: [0], min_length=1)
    out_dir: str | None = None
    full: bool = False
    record_timing: bool = False
    export_data: bool = False


class NetworkSection(_Section):
    mode: SlopeMode = SlopeMode.FIXED
    base: Nonlinearity | None = None
    n: float | None = Field(default=None, ge=1.0)
    widths: list[int] | None = Field(default=None, min_length=2)


class OptimizerSection(_Section):
    kind: OptimizerKind | None = None
    learning_rate: float | None = Field(default=None, gt=0.0)
    iterations: int | None = Field(default=None, ge=0)
    batch_size: int | None = Field(default=None, ge=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1.0e-8, gt=0.0)
    armijo_beta: float = Field(default=0.5, gt=0.0, lt=1.0)
    armijo_sigma: float = Field(default=1.0e-4, gt=0.0, lt=1.0)


class ObjectiveSection(_Section):
    w_f: float | None = Field(default=None, ge=0.0)
    w_u: float | None = Field(default=None, ge=0.0)
    w_a: float | None = Field(default=None, ge=0.0)
    recovery: bool = True
    freeze_slopes: bool = False


class ProblemSection(BaseModel):
    """Preset options (alpha_true, nu_true, noise, ...). Names are checked against the chosen preset."""

    model_config = ConfigDict(extra="allow")

    def options(self) -> dict[str, Any]:
        return dict(self.model_extra or {})


class DynamicsSection(_Section):
    methods: list[SlopeMode] = Field(default_factory=lambda: list(SlopeMode), min_length=1)
    eta: float = Field(default=0.01, ge=0.0)
    hessian_every: int = Field(default=1, ge=1)
    hessian_step: float = Field(default=1.0e-4, gt=0.0)
    recovery_weight: float = Field(default=0.0, ge=0.0)
    verify_modes: list[SlopeMode] = Field(default_factory=lambda: list(SlopeMode), min_length=1)
    verify_etas: list[float] = Field(default_factory=lambda: [1.0e-3, 1.0e-2], min_length=1)
    verify_nets: int = Field(default=20, ge=1)
    verify_seed: int = Field(default=0, ge=0)
    corrupt_a: bool = False


class RunConfig(_Section):
    run: RunSection = Field(default_factory=RunSection)
    network: NetworkSection = Field(default_factory=NetworkSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    objective: ObjectiveSection = Field(default_factory=ObjectiveSection)
    problem: ProblemSection = Field(default_factory=ProblemSection)
    dynamics: DynamicsSection = Field(default_factory=DynamicsSection)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir or OUT_DIR)


def _validation_message(ex: ValidationError) -> str:
    problems = []
    for error in ex.errors():
        key = ".".join(str(part) for part in error["loc"])
        if error["type"] == "extra_forbidden":
            problems.append(f"unknown key '{key}'")
        else:
            problems.append(f"'{key}': {error['msg']}")
    return "invalid configuration: " + "; ".join(problems)


def validate_config(data: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as ex:
        raise ConfigError(_validation_message(ex)) from ex


def load_config(path: str | Path | None = None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with path.open("rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError as ex:
        raise ConfigError(f"config file not found: {path}") from ex
    except tomllib.TOMLDecodeError as ex:
        raise ConfigError(f"config file {path} is not valid TOML: {ex}") from ex
    return validate_config(data)


def parse_seeds(text: str) -> list[int]:
    """'0,1,2' -> [0, 1, 2]."""
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as ex:
        raise ConfigError(f"seeds must be comma-separated integers, got '{text}'") from ex
    if not seeds:
        raise ConfigError("seed list is empty")
    negative = [seed for seed in seeds if seed < 0]
    if negative:
        raise ConfigError(f"seeds must be >= 0, got {negative}")
    return seeds


def apply_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """Command-line values win over the file. Keys: seeds, mode, out_dir, full, export_data, corrupt_a, preset."""
    data = config.model_dump(mode="json")
    sections = {
        "seeds": "run",
        "preset": "run",
        "out_dir": "run",
        "full": "run",
        "export_data": "run",
        "mode": "network",
        "corrupt_a": "dynamics",
    }
    for key, value in overrides.items():
        if key not in sections:
            raise ConfigError(f"unknown override '{key}'")
        if value is not None:
            data[sections[key]][key] = value
    return validate_config(data)

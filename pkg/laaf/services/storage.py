# laaf/services/storage.py
"""Run artifacts on disk: checkpoints, traces, summaries and datasets.

Every CSV starts with a header row; floats are written with 17 significant
digits so files are exact and byte-identical for identical runs.
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from ..errors import ConfigError, ShapeError
from .network import ActivationMode, FlatParams, NetworkParams, flatten, unflatten
from .optimize import TrainingTrace

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TRACE_COLUMNS = ("iteration", "total", "mse_u", "mse_f", "recovery", "slope_min", "slope_mean", "slope_max")


class CheckpointFile(BaseModel):
    version: Literal[1] = CHECKPOINT_VERSION
    widths: list[int]
    mode: str
    base: str
    n: float
    seed: int | None = None
    values: list[float]
    inverse: dict[str, float] = Field(default_factory=dict)


class RunSummary(BaseModel):
    preset: str
    mode: str
    seed: int
    iterations: int
    final: dict[str, float]
    slopes: dict[str, float | None] = Field(default_factory=dict)
    inverse_estimates: dict[str, float] = Field(default_factory=dict)
    inverse_true: dict[str, float] = Field(default_factory=dict)
    relative_l2_error: float | None = None
    accuracy: float | None = None
    settings: dict[str, Any] = Field(default_factory=dict)


def _number(value: float | None) -> str:
    return "" if value is None else format(float(value), ".17g")


def _prepare(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def save_checkpoint(path: str | Path, params: NetworkParams, inverse: dict[str, float] | None = None) -> Path:
    path = _prepare(path)
    checkpoint = CheckpointFile(
        widths=list(params.widths),
        mode=params.mode.kind.value,
        base=params.mode.base.value,
        n=params.mode.n,
        seed=params.seed,
        values=flatten(params).values.tolist(),
        inverse=dict(inverse or {}),
    )
    path.write_text(checkpoint.model_dump_json(indent=2), encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, dict[str, float]]:
    path = Path(path)
    try:
        checkpoint = CheckpointFile.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError as ex:
        raise ConfigError(f"checkpoint not found: {path}") from ex
    except ValidationError as ex:
        raise ConfigError(f"malformed checkpoint {path}: {ex.error_count()} error(s)") from ex
    mode = ActivationMode(checkpoint.mode, checkpoint.base, checkpoint.n)
    flat = FlatParams(np.asarray(checkpoint.values, dtype=np.float64), tuple(checkpoint.widths), mode)
    return unflatten(flat, checkpoint.seed), dict(checkpoint.inverse)


def _write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> Path:
    path = _prepare(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def save_trace(path: str | Path, trace: TrainingTrace, record_timing: bool = False) -> Path:
    header = list(TRACE_COLUMNS) + list(trace.inverse_names) + (["wall_ms"] if record_timing else [])

    def row(record):
        values = [str(record.iteration)] + [
            _number(getattr(record, column)) for column in TRACE_COLUMNS[1:]
        ]
        values += [_number(record.inverse.get(name)) for name in trace.inverse_names]
        if record_timing:
            values.append(_number(record.wall_ms))
        return values

    return _write_rows(path, header, (row(r) for r in trace.records))


def read_trace(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def save_summary(path: str | Path, summary: RunSummary) -> Path:
    path = _prepare(path)
    path.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    return path


def save_json(path: str | Path, data: dict[str, Any]) -> Path:
    path = _prepare(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    return path


def save_dataset(path: str | Path, x: np.ndarray, targets: np.ndarray | None = None, target_name: str = "target") -> Path:
    """Points as x0, x1, ... plus an optional target or label column."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    header = [f"x{i}" for i in range(x.shape[1])]
    integer_target = False
    if targets is not None:
        targets = np.asarray(targets)
        if targets.ndim == 2:
            targets = targets[:, 0] if targets.shape[1] == 1 else None
        if targets is None or len(targets) != len(x):
            raise ShapeError("dataset export needs one target per point")
        integer_target = np.issubdtype(targets.dtype, np.integer)
        header.append(target_name)

    def row(i):
        values = [_number(x[i, j]) for j in range(x.shape[1])]
        if targets is not None:
            values.append(str(int(targets[i])) if integer_target else _number(targets[i]))
        return values

    return _write_rows(path, header, (row(i) for i in range(len(x))))


def save_condition_run(path: str | Path, epochs: Sequence[int], losses: Sequence[float], conditions: Sequence[float], normalized: Sequence[float]) -> Path:
    rows = (
        [str(epoch), _number(loss), _number(cond), _number(norm)] for epoch, loss, cond, norm in zip(epochs, losses, conditions, normalized)
    )
    return _write_rows(path, ["epoch", "loss", "condition", "normalized_condition"], rows)

import json

import numpy as np
import pytest

from laaf.errors import ConfigError, ShapeError
from laaf.services.network import SlopeMode, flatten
from laaf.services.optimize import TraceRecord, TrainingTrace
from laaf.services.storage import (
    RunSummary,
    load_checkpoint,
    read_trace,
    save_checkpoint,
    save_condition_run,
    save_dataset,
    save_json,
    save_summary,
    save_trace,
)

from .conftest import make_params


def _trace():
    records = [
        TraceRecord(0, 1.0 / 3.0, 0.25, 0.1, 0.5, 0.1, 0.2, 0.3, {"nu": 0.5}, 1.5),
        TraceRecord(1, 0.1, 0.05, 0.02, 0.4, 0.1, 0.2, 0.3, {"nu": 0.45}, 2.5),
    ]
    return TrainingTrace(records, np.zeros(3), ("nu",))


@pytest.mark.parametrize("kind", list(SlopeMode))
def test_checkpoint_round_trip_is_exact(tmp_path, rng, kind):
    params = make_params([2, 3, 1], kind, rng=rng)
    params.weights[0][0, 0] = 0.1
    params.weights[0][0, 1] = 1.0 / 3.0
    path = save_checkpoint(tmp_path / "run" / "checkpoint.json", params, {"alpha": 0.71})
    restored, inverse = load_checkpoint(path)
    assert np.array_equal(flatten(restored).values, flatten(params).values)
    assert restored.mode == params.mode
    assert restored.widths == params.widths
    assert inverse == {"alpha": 0.71}


def test_malformed_checkpoints_are_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 2, "widths": [1, 1], "mode": "fixed", "base": "tanh", "n": 1, "values": [0, 0]}')
    with pytest.raises(ConfigError):
        load_checkpoint(bad)
    bad.write_text("not json")
    with pytest.raises(ConfigError):
        load_checkpoint(bad)


def test_trace_csv(tmp_path):
    path = save_trace(tmp_path / "trace.csv", _trace())
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,total,mse_u,mse_f,recovery,slope_min,slope_mean,slope_max,nu"
    assert len(lines) == 3
    rows = read_trace(path)
    assert float(rows[0]["total"]) == 1.0 / 3.0
    assert rows[1]["nu"] == "0.45000000000000001"


def test_trace_timing_column_is_optional(tmp_path):
    path = save_trace(tmp_path / "trace.csv", _trace(), record_timing=True)
    assert path.read_text().splitlines()[0].endswith(",nu,wall_ms")


def test_missing_values_are_blank(tmp_path):
    trace = TrainingTrace([TraceRecord(0, 1.0, 1.0, 0.0, 0.0)])
    rows = read_trace(save_trace(tmp_path / "trace.csv", trace))
    assert rows[0]["slope_min"] == ""


def test_dataset_export(tmp_path):
    x = np.array([[0.5, -1.0], [0.25, 2.0]])
    lines = save_dataset(tmp_path / "data.csv", x, np.array([1, 0]), "label").read_text().splitlines()
    assert lines == ["x0,x1,label", "0.5,-1,1", "0.25,2,0"]
    lines = save_dataset(tmp_path / "points.csv", x).read_text().splitlines()
    assert lines[0] == "x0,x1"
    with pytest.raises(ShapeError):
        save_dataset(tmp_path / "bad.csv", x, np.zeros(3))


def test_condition_run_csv(tmp_path):
    path = save_condition_run(tmp_path / "gaaf.csv", [0, 1], [0.7, 0.6], [40.0, 30.0], [1.0, 0.75])
    assert path.read_text().splitlines() == ["epoch,loss,condition,normalized_condition", "0,0.69999999999999996,40,1", "1,0.59999999999999998,30,0.75"]


def test_summary_and_json(tmp_path):
    summary = RunSummary(preset="discontinuous", mode="llaaf", seed=0, iterations=10, final={"total": 0.5})
    path = save_summary(tmp_path / "summary.json", summary)
    assert json.loads(path.read_text())["final"] == {"total": 0.5}
    path = save_json(tmp_path / "other.json", {"b": 1, "a": 2})
    assert path.read_text().index('"a"') < path.read_text().index('"b"')

"""On-disk layout of a training run.

A run directory holds:

``metadata.txt``    key=value lines describing the configuration and outcome
``steps.csv``       step, loss, fired_count
``model.csv``       tensor, index, value of the final parameters
``transcript.csv``  step, group, fired, sign (FERRET runs only)
``timing.txt``      wall-clock duration; the only file that differs between reruns
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .models import ModelKind, ToyModel, make_model
from .trainers import RunRecord

METADATA = "metadata.txt"
STEPS = "steps.csv"
MODEL = "model.csv"
TRANSCRIPT = "transcript.csv"
TIMING = "timing.txt"


def fmt(value) -> str:
    """Stable text form: repr for floats, 'inf'/'nan' spelled out, str otherwise."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_kv(path, pairs) -> None:
    with open(path, "w") as fh:
        for k, v in pairs:
            fh.write(f"{k}={fmt(v)}\n")


def read_kv(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line and "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
    return out


def write_run(run_dir, rec: RunRecord, metadata, *, timing: bool = True) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_kv(run_dir / METADATA, metadata)
    with open(run_dir / STEPS, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "fired_count"])
        for t, (loss, fired) in enumerate(zip(rec.losses, rec.fired_per_step)):
            w.writerow([t, fmt(float(loss)), int(fired)])
    write_model_csv(run_dir / MODEL, rec.model)
    if rec.update_log is not None:
        rec.update_log.to_csv(run_dir / TRANSCRIPT)
    if timing:
        write_kv(run_dir / TIMING, [("duration_seconds", rec.duration)])


def write_model_csv(path, model: ToyModel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tensor", "index", "value"])
        for name, t in zip(model.names, model.tensors):
            for i, v in enumerate(t):
                w.writerow([name, i, fmt(float(v))])


def read_model_csv(path, kind, d: int, hidden: int = 16, bias: bool = True) -> ToyModel:
    values = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            values.append(float(row["value"]))
    return make_model(ModelKind(kind), d, np.array(values), hidden=hidden, bias=bias)


def read_steps(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "step": np.array([int(r["step"]) for r in rows]),
        "loss": np.array([float(r["loss"]) for r in rows]),
        "fired_count": np.array([int(r["fired_count"]) for r in rows]),
    }

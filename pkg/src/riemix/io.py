"""File formats: data CSV, model JSON, trace CSV, summary JSON.

Models serialize to a single JSON object:

    {"weights": [...], "means": [[...]], "covariances": [[[...]]],
     "eta": [...], "s_blocks": [[[...]]],
     "normalization": {"means": [...], "sds": [...]} | null,
     "meta": {"solver": ..., "iterations": ..., "time_s": ..., "termination": ...}}

Floats are written with Python's shortest round-trip repr, so
load(save(model)) reproduces every value bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import GmmParams, forward_transform
from .rtr import FitReport


def save_data_csv(path, points: np.ndarray) -> None:
    """Observations as CSV with header x1..xd, one row per observation."""
    points = np.asarray(points, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(points.shape[1])])
        for row in points:
            writer.writerow([repr(float(v)) for v in row])


def load_data_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty CSV")
        rows = [[float(v) for v in row] for row in reader if row]
    return np.asarray(rows, dtype=float)


def model_to_dict(
    params: GmmParams,
    normalization: dict | None = None,
    meta: dict | None = None,
    extra: dict | None = None,
) -> dict:
    theta = forward_transform(params)
    doc = {
        "weights": params.weights.tolist(),
        "means": params.means.tolist(),
        "covariances": [c.entries.tolist() for c in params.covariances],
        "eta": theta.eta.tolist(),
        "s_blocks": [s.entries.tolist() for s in theta.s_blocks],
        "normalization": normalization,
        "meta": meta or {},
    }
    if extra:
        doc.update(extra)
    return doc


def save_model_json(path, params: GmmParams, normalization=None, meta=None, extra=None) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(params, normalization, meta, extra), fh, indent=1)
        fh.write("\n")


def load_model_json(path) -> tuple[GmmParams, dict]:
    """Returns the parameters and the full decoded document."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    params = GmmParams(
        np.asarray(doc["weights"], dtype=float),
        np.asarray(doc["means"], dtype=float),
        [np.asarray(c, dtype=float) for c in doc["covariances"]],
    )
    return params, doc


_TRACE_FIELDS = [
    "t",
    "objective",
    "accepted",
    "grad_norm",
    "delta",
    "rho",
    "step_norm",
    "tcg_iterations",
    "tcg_stop_reason",
    "min_weight",
    "block_norm_ratio",
]


def save_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TRACE_FIELDS)
        for rec in trace:
            row = asdict(rec)
            writer.writerow([_format_cell(row[k]) for k in _TRACE_FIELDS])


def _format_cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def summary_dict(report: FitReport, zero_time: bool = False) -> dict:
    return {
        "solver": report.solver,
        "termination": report.termination,
        "iterations": report.n_iterations,
        "accepted_iterations": report.n_accepted,
        "time_s": 0.0 if zero_time else report.wall_time_s,
        "all": report.final_all,
        "all_penalized": report.final_all_penalized,
        "objective": report.final_objective,
        "grad_norm": report.final_grad_norm,
    }


def save_json(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def write_rows_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])

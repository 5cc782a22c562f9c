"""CSV and JSON artifacts: writers, readers and output schemas.

Numbers in CSV files are written with 17 significant digits, which is
enough to reproduce every double exactly on read-back.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .uq import CovarianceModel


class ReportError(ValueError):
    pass


def fmt(v) -> str:
    return format(float(v), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


# -- CSV --------------------------------------------------------------

def write_matrix_csv(path, M, row_labels: Sequence[str], col_labels: Sequence[str], corner: str = "label"):
    M = np.asarray(M, dtype=float)
    if M.shape != (len(row_labels), len(col_labels)):
        raise ReportError(f"matrix shape {M.shape} does not match labels ({len(row_labels)}, {len(col_labels)})")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([corner, *col_labels])
        for lab, row in zip(row_labels, M):
            w.writerow([lab, *(fmt(v) for v in row)])


def read_matrix_csv(path):
    """Returns ``(M, row_labels, col_labels)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ReportError(f"{path}: empty file")
    cols = rows[0][1:]
    labels, vals = [], []
    for k, r in enumerate(rows[1:], start=2):
        if len(r) != len(cols) + 1:
            raise ReportError(f"{path}:{k}: expected {len(cols) + 1} fields, got {len(r)}")
        labels.append(r[0])
        try:
            vals.append([float(v) for v in r[1:]])
        except ValueError as exc:
            raise ReportError(f"{path}:{k}: {exc}") from None
    return np.array(vals, dtype=float).reshape(len(labels), len(cols)), labels, cols


def write_table_csv(path, header: Sequence[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def read_table_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# -- JSON -------------------------------------------------------------

SOLUTION_SCHEMA = {
    "type": "object",
    "required": ["model", "converged", "iterations", "merit", "labels", "x", "F", "activity", "check"],
    "properties": {
        "model": {"type": "string"},
        "converged": {"type": "boolean"},
        "iterations": {"type": "integer", "minimum": 0},
        "merit": {"type": "number"},
        "labels": {"type": "array", "items": {"type": "string"}},
        "x": {"type": "array", "items": {"type": "number"}},
        "F": {"type": "array", "items": {"type": "number"}},
        "activity": {"type": "array", "items": {"enum": ["free", "strong-x", "strong-F", "weak", "violated"]}},
        "check": {"type": "object"},
        "market": {"type": "object"},
    },
}

DIAGNOSTICS_SCHEMA = {
    "type": "object",
    "required": ["n", "m", "rank", "kappa_H", "ill_conditioned", "zero_set", "used_pseudoinverse", "trace"],
    "properties": {
        "n": {"type": "integer"}, "m": {"type": "integer"}, "rank": {"type": "integer"},
        "kappa_H": {"type": ["number", "string"]},
        "ill_conditioned": {"type": "boolean"},
        "zero_set": {"type": "array", "items": {"type": "integer"}},
        "zero_set_labels": {"type": "array", "items": {"type": "string"}},
        "used_pseudoinverse": {"type": "boolean"},
        "trace": {"type": "number"},
    },
}

COMPARISON_SCHEMA = {
    "type": "object",
    "required": ["model", "approx_trace", "mc_traces", "band", "inside_band", "relative_gap", "samples", "runs", "seed"],
    "properties": {
        "model": {"type": "string"},
        "approx_trace": {"type": "number"},
        "mc_traces": {"type": "array", "items": {"type": "number"}},
        "band": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "inside_band": {"type": "boolean"},
        "relative_gap": {"type": "number"},
        "samples": {"type": "integer"},
        "runs": {"type": "integer"},
        "seed": {"type": "integer"},
        "failures": {"type": "integer"},
        "unreliable": {"type": "boolean"},
    },
}


def write_json(path, obj, schema: Optional[dict] = None):
    data = _jsonable(obj)
    if schema is not None:
        try:
            jsonschema.validate(data, schema)
        except jsonschema.ValidationError as exc:
            raise ReportError(f"refusing to write {path}: {exc.message}") from None
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path, schema: Optional[dict] = None):
    data = json.loads(Path(path).read_text())
    if schema is not None:
        jsonschema.validate(data, schema)
    return data


# -- covariance files -------------------------------------------------

def read_covariance(path, labels: Optional[Sequence[str]] = None) -> CovarianceModel:
    """Load a covariance from JSON ``{"labels": [...], "matrix": [[...]]}`` or a labelled CSV.

    With ``labels`` given, the file's rows are reordered to match; any
    label mismatch is an error. The result is checked for symmetry and PSD.
    """
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(doc, dict) or "matrix" not in doc:
            raise ReportError(f"{path}: expected an object with a 'matrix' field")
        try:
            M = np.array(doc["matrix"], dtype=float)
        except (TypeError, ValueError):
            raise ReportError(f"{path}: $.matrix must be a square array of numbers") from None
        file_labels = doc.get("labels")
    else:
        M, rows, cols = read_matrix_csv(path)
        if rows != cols:
            raise ReportError(f"{path}: row and column labels differ")
        file_labels = rows
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ReportError(f"{path}: covariance must be square, got shape {M.shape}")
    if labels is not None:
        labels = list(labels)
        if file_labels is None:
            if M.shape[0] != len(labels):
                raise ReportError(f"{path}: expected {len(labels)} rows, got {M.shape[0]}")
        else:
            if sorted(file_labels) != sorted(labels):
                missing = sorted(set(labels) - set(file_labels))
                extra = sorted(set(file_labels) - set(labels))
                raise ReportError(f"{path}: labels do not match the model (missing {missing}, unexpected {extra})")
            order = [list(file_labels).index(lab) for lab in labels]
            M = M[np.ix_(order, order)]
        file_labels = labels
    return CovarianceModel(M, file_labels).validate()


def write_covariance(path, cov: CovarianceModel):
    labels = cov.labels or [f"theta{j}" for j in range(cov.m)]
    path = Path(path)
    if path.suffix.lower() == ".json":
        write_json(path, {"labels": list(labels), "matrix": cov.C})
    else:
        write_matrix_csv(path, cov.C, labels, labels)

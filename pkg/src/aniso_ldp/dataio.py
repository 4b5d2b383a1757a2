"""CSV and JSON plumbing shared by the pipeline, harness, and CLI.

Feature CSVs carry a header row and one record per line; all numeric
output is written with 17 significant digits so decimal round-trips are
lossless. JSON is written with sorted keys for diffability.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import SchemaError

__all__ = [
    "format_float",
    "read_feature_csv",
    "write_feature_csv",
    "read_column_csv",
    "write_column_csv",
    "write_json",
    "read_json",
]


def format_float(x):
    return f"{float(x):.17g}"


def read_feature_csv(path):
    """Read a feature CSV into (header, (n, m) float array).

    Raises SchemaError (with the 1-based line number) on an empty file,
    ragged rows, or unparseable floats.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    lines = [line for line in lines if line != ""]
    if not lines:
        raise SchemaError(f"{path}: empty CSV", line=1)
    header = lines[0].split(",")
    width = len(header)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != width:
            raise SchemaError(
                f"{path}: line {lineno}: expected {width} columns, got {len(parts)}",
                line=lineno,
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise SchemaError(f"{path}: line {lineno}: {exc}", line=lineno) from exc
    if not rows:
        raise SchemaError(f"{path}: no data rows", line=1)
    return header, np.asarray(rows, dtype=np.float64)


def write_feature_csv(path, header, values):
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if len(header) != values.shape[1]:
        raise ValueError("header width does not match value width")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in values:
            fh.write(",".join(format_float(x) for x in row) + "\n")


def read_column_csv(path, dtype=float):
    """Single-column CSV (labels or targets) -> (name, 1-D array)."""
    header, values = read_feature_csv(path)
    if values.shape[1] != 1:
        raise SchemaError(f"{path}: expected a single column", line=1)
    column = values[:, 0]
    if dtype is int:
        rounded = np.rint(column)
        if np.any(np.abs(column - rounded) > 1e-9):
            raise SchemaError(f"{path}: expected integer labels", line=2)
        column = rounded.astype(np.int64)
    return header[0], column


def write_column_csv(path, name, values):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{name}\n")
        for x in np.asarray(values).ravel():
            if isinstance(x, (np.integer, int)):
                fh.write(f"{int(x)}\n")
            else:
                fh.write(format_float(x) + "\n")


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)

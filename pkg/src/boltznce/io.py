"""Deterministic CSV/JSON serialization.

Floats are written with 17 significant digits so a write/read round trip
is bit-exact, and JSON keys are sorted so equal content gives equal bytes.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

__all__ = ["write_csv", "read_csv", "write_json", "read_json", "coordinate_columns", "to_jsonable"]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, columns: dict) -> None:
    """Write equal-length 1D columns with a header row, in the given key order."""
    names = list(columns)
    arrays = [np.asarray(columns[n]).reshape(-1) for n in names]
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise ValueError(f"columns have different lengths: {sorted(lengths)}")
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in zip(*arrays):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def coordinate_columns(table: dict[str, np.ndarray]) -> np.ndarray:
    """Stack the ``x_0, x_1, ...`` columns of a table into an ``(n, dim)`` array."""
    names = sorted((k for k in table if k.startswith("x_")), key=lambda k: int(k[2:]))
    if not names:
        raise ValueError("table has no coordinate columns x_0, x_1, ...")
    return np.stack([table[k] for k in names], axis=1)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def finite_or_none(v):
    return float(v) if v is not None and math.isfinite(v) else None

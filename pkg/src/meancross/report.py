"""Bit-stable report serialization.

JSON reports must be byte-identical across reruns and worker counts, so
floats are rendered with a fixed 17-significant-digit format (enough to
round-trip any double), dictionaries keep insertion order, and
non-finite values map to null.  CSV side files use the same float
format.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

__all__ = ["fmt_float", "to_jsonable", "dumps", "write_json", "write_csv"]


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def to_jsonable(obj):
    """Coerce numpy containers/scalars to plain Python values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def _emit(obj, indent: int) -> str:
    pad = "  " * indent
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return "null"
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, list):
        if not obj:
            return "[]"
        inner = ",\n".join(f"{pad}  {_emit(v, indent + 1)}" for v in obj)
        return f"[\n{inner}\n{pad}]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        inner = ",\n".join(
            f"{pad}  {json.dumps(str(k))}: {_emit(v, indent + 1)}"
            for k, v in obj.items())
        return f"{{\n{inner}\n{pad}}}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return _emit(to_jsonable(obj), 0) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def write_csv(path, header, rows) -> None:
    """Rows of mixed values; floats are written with the 17g format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_float(v) if isinstance(v, (float, np.floating))
                             else v for v in row])

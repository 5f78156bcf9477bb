"""Deterministic, atomic serialization of records and summaries."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

SCHEMA_VERSION = 1


def fmt(x) -> str:
    """Round-trip exact text for numbers (17 significant digits)."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.17g}"
    if x is None:
        return ""
    try:
        return f"{float(x):.17g}"
    except (TypeError, ValueError):
        return str(x)


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, columns, rows) -> Path:
    return atomic_write_text(path, csv_text(columns, rows))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return fmt(obj)
    return obj


def json_text(payload: dict) -> str:
    body = {"schema_version": SCHEMA_VERSION, **payload}
    return json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n"


def write_json(path, payload: dict) -> Path:
    return atomic_write_text(path, json_text(payload))


def write_field_csv(path, field, label: str = "") -> Path:
    """Nodal field as a single column whose header names the grid."""
    g = field.grid
    header = f"{label or 'values'}[dim={g.dim};extent={'/'.join(fmt(e) for e in g.extent)};n={g.n_interior}]"
    lines = [header] + [fmt(float(v)) for v in field.values]
    return atomic_write_text(path, "\n".join(lines) + "\n")

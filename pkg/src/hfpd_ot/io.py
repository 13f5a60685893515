"""CSV and JSON emission shared by the experiment writers and the CLI.

Floats are written with ``repr`` (shortest round-trip form), so reruns with
identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(
    path,
    header: Sequence[str],
    rows: Iterable[Sequence],
    comments: Sequence[str] = (),
) -> Path:
    """Write rows under a header; ``comments`` become leading ``# `` lines."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[str], list[list[str]]]:
    """Return ``(comments, header, rows)`` with cells as strings."""
    comments, lines = [], []
    with Path(path).open(newline="") as fh:
        for line in fh:
            if line.startswith("# ") and not lines:
                comments.append(line[2:].rstrip("\n"))
            else:
                lines.append(line)
    rows = list(csv.reader(lines))
    return comments, rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


__all__ = ["write_csv", "read_csv", "write_json"]

"""Artifact persistence: canonical JSON, matrix blocks, CSV time series.

Matrices are serialized row-major with explicit rows/cols fields; floats
round-trip exactly (json and repr both emit shortest round-trip decimals).
Every artifact embeds the config hash and seed so reruns are comparable
byte for byte; volatile metadata (timestamps, durations) lives in a
sidecar instead.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(raw_config: dict) -> str:
    return hashlib.sha256(canonical_json(raw_config).encode()).hexdigest()


def matrix_to_json(mat: np.ndarray) -> dict:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    return {"rows": mat.shape[0], "cols": mat.shape[1],
            "data": [float(x) for x in mat.ravel(order="C")]}


def matrix_from_json(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=float).reshape(obj["rows"], obj["cols"])


def dump_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_csv(path, header: list[str], rows, comment_lines=()) -> None:
    """Write rows of floats/ints with shortest round-trip formatting."""
    with open(path, "w", newline="") as fh:
        for line in comment_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return int(x)
    if x is None or (isinstance(x, str) and not x):
        return ""
    return repr(float(x))


def read_csv(path):
    """Read a CSV written by write_csv: returns (header, list of rows)."""
    header = None
    rows = []
    with open(path, newline="") as fh:
        for record in csv.reader(fh):
            if not record or record[0].startswith("#"):
                continue
            if header is None:
                header = record
                continue
            rows.append([float(x) if x != "" else np.nan for x in record])
    return header, rows

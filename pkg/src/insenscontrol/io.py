"""Deterministic CSV / JSON artifact writers.

CSV files start with one comment line

    # insenscontrol <version> config=<hash> <title>

followed by a header row; floats use 17 significant digits with ``.`` as
decimal separator, so values round-trip exactly.  JSON files carry the
same information in a leading ``"meta"`` object and use sorted keys;
non-finite floats are written as the strings ``"NaN"``, ``"Infinity"``
and ``"-Infinity"``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .errors import OutputError


def fmt(x):
    """Locale-independent round-trip text of a scalar."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".17g")
    return str(x)


def header_line(config_hash, title=""):
    text = f"# insenscontrol {__version__} config={config_hash}"
    return f"{text} {title}".rstrip()


def write_csv(path, columns, rows, config_hash, title=""):
    """Write ``rows`` (iterables matching ``columns``) with the standard header."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(header_line(config_hash, title) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        return x
    return obj


def write_json(path, payload, config_hash, title=""):
    path = Path(path)
    doc = {"meta": {"library": "insenscontrol", "version": __version__, "config": config_hash, "title": title}}
    doc.update(_jsonable(payload))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv_rows(path):
    """Rows of an artifact CSV as dicts (comment lines skipped)."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            return list(csv.DictReader(line for line in fh if not line.startswith("#")))
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc


def node_table(mesh, values, times=None, nodes=None):
    """Long-format rows ``(n, t, node, r, theta, value)`` of a lattice array."""
    values = np.atleast_2d(values)
    nodes = np.arange(mesh.n_nodes) if nodes is None else np.asarray(nodes)
    times = np.zeros(values.shape[0]) if times is None else times
    for n in range(values.shape[0]):
        for k in nodes:
            yield (n, times[n], int(k), mesh.node_r[k], mesh.node_theta[k], values[n, k])

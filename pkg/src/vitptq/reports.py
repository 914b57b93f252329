"""JSON and CSV report writers.

Every report carries the run's config hash and seed: JSON reports as
top-level keys, CSV tables as the two leading columns of every row.
Floats are written with ``repr`` so identical runs give identical bytes.
Wall-clock timings go to a separate ``*.timings.json`` file.
"""

import csv
import io
import json
import os

import numpy as np

from .checkpoint import atomic_write


def _plain(o):
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return _plain(o.tolist())
    if isinstance(o, np.generic):
        return o.item()
    return o


def dumps_json(obj):
    return json.dumps(_plain(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path, obj, config_hash, seed):
    body = dict(_plain(obj), config_hash=config_hash, seed=seed)
    atomic_write(path, dumps_json(body).encode("utf-8"))


def timings_path(report_path):
    root, _ = os.path.splitext(report_path)
    return root + ".timings.json"


def write_timings(report_path, timings):
    atomic_write(timings_path(report_path), dumps_json(timings).encode("utf-8"))


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def csv_text(header, rows, config_hash, seed):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_hash", "seed"] + list(header))
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
        w.writerow([config_hash, seed] + [_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, config_hash, seed):
    atomic_write(path, csv_text(header, rows, config_hash, seed).encode("utf-8"))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))

"""File formats shared by the CLI.

* JSON for manifests, reports and checkpoints.  Floats are written with
  Python's shortest round-trip representation, so every value reads back
  bit-exact.
* CSV for matrices and plot exports, floats as ``%.17g``.
* A raw binary matrix format: 8-byte magic, two little-endian uint32 dims
  (rows, cols), then rows*cols little-endian float64 values in row-major
  order.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

MAGIC = b"DPPLARR1"
_HEADER = struct.Struct("<8sII")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps_json(obj):
    return json.dumps(obj, default=_default, indent=2, sort_keys=True, allow_nan=False)


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_array_bin(path, arr):
    a = np.atleast_2d(np.asarray(arr, dtype="<f8"))
    if a.ndim != 2:
        raise InvalidArgumentError("binary format stores 2-D arrays")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, a.shape[0], a.shape[1]))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_array_bin(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidArgumentError(f"{path}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise InvalidArgumentError(f"{path}: bad magic")
    body = data[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise InvalidArgumentError(f"{path}: expected {rows}x{cols} values")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)


def write_csv(path, arr, header=None):
    a = np.atleast_2d(np.asarray(arr, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for row in a:
            w.writerow(["%.17g" % v for v in row])


def read_csv(path, header=False):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if header:
        rows = rows[1:]
    if not rows:
        raise InvalidArgumentError(f"{path}: no data rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise InvalidArgumentError(f"{path}: ragged rows")
    try:
        return np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise InvalidArgumentError(f"{path}: {exc}") from None


def read_matrix(path):
    """Read a matrix from ``.bin`` or ``.csv`` (chosen by extension)."""
    p = Path(path)
    if p.suffix == ".bin":
        return read_array_bin(p)
    return read_csv(p)


def write_matrix(path, arr):
    p = Path(path)
    if p.suffix == ".bin":
        write_array_bin(p, arr)
    else:
        write_csv(p, arr)

"""Little-endian float64 matrix containers.

Layout: 4-byte magic, u32 rows, u32 cols, then rows*cols float64 values in
row-major order.  A CSV variant stores one matrix row per line.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

DICTIONARY_MAGIC = b"GBPD"
CLASSIFIER_MAGIC = b"GBPC"
MODEL_MAGIC = b"GBPM"
_HEADER = struct.Struct("<4sII")


def write_matrix(path, matrix, magic=DICTIONARY_MAGIC):
    a = np.asarray(matrix, dtype="<f8")
    if a.ndim != 2:
        raise FormatError(f"expected a 2-d matrix, got shape {a.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, a.shape[0], a.shape[1]))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_matrix(path, magic=DICTIONARY_MAGIC):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got, rows, cols = _HEADER.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    need = _HEADER.size + 8 * rows * cols
    if len(raw) != need:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, header implies {need}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)


def write_matrix_csv(path, matrix):
    a = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in a:
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise FormatError(f"{path}: empty matrix file")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise FormatError(f"{path}: ragged rows")
    try:
        return np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_bundle(path, meta, arrays, magic=MODEL_MAGIC):
    """Write a JSON header plus named float64 arrays."""
    order = list(arrays)
    header = dict(meta)
    header["arrays"] = [[k, list(np.shape(arrays[k]))] for k in order]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in order:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def read_bundle(path, magic=MODEL_MAGIC):
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    (n,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + n])
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    pos = 8 + n
    arrays = {}
    for name, shape in header.pop("arrays"):
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated array {name!r}")
        arrays[name] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
        pos = end
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return header, arrays

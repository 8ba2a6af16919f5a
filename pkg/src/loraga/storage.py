"""Matrix persistence: the binary LGA1 format and a plain CSV form.

LGA1 layout: magic ``b"LGA1"``, rows and cols as little-endian uint64,
then rows*cols little-endian float64 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .linalg import Matrix, as_matrix

MAGIC = b"LGA1"
_HEADER = struct.Struct("<4sQQ")


class FormatError(ValueError):
    pass


def dumps_lga1(m) -> bytes:
    arr = as_matrix(m)
    rows, cols = arr.shape
    body = np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")
    return _HEADER.pack(MAGIC, rows, cols) + body


def loads_lga1(buf: bytes) -> Matrix:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated LGA1 header")
    magic, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(buf) != expected:
        raise FormatError(f"LGA1 payload is {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
    return as_matrix(data.reshape(rows, cols).astype(np.float64))


def save_lga1(path, m) -> None:
    Path(path).write_bytes(dumps_lga1(m))


def load_lga1(path) -> Matrix:
    return loads_lga1(Path(path).read_bytes())


def save_matrix_csv(path, m) -> None:
    """First line ``rows,cols``, then one row per line (repr floats round-trip)."""
    arr = as_matrix(m)
    lines = [f"{arr.shape[0]},{arr.shape[1]}"]
    lines += [",".join(repr(float(x)) for x in row) for row in arr]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix_csv(path) -> Matrix:
    text = Path(path).read_text().strip().splitlines()
    if not text:
        raise FormatError(f"{path}: empty file")
    try:
        rows, cols = (int(x) for x in text[0].split(","))
    except ValueError as exc:
        raise FormatError(f"{path}:1: bad shape header {text[0]!r}") from exc
    if len(text) - 1 != rows:
        raise FormatError(f"{path}: expected {rows} rows, found {len(text) - 1}")
    out = np.empty((rows, cols))
    for i, line in enumerate(text[1:]):
        vals = line.split(",")
        if len(vals) != cols:
            raise FormatError(f"{path}:{i + 2}: expected {cols} values, found {len(vals)}")
        try:
            out[i] = [float(v) for v in vals]
        except ValueError as exc:
            raise FormatError(f"{path}:{i + 2}: {exc}") from exc
    return as_matrix(out)

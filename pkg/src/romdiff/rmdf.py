"""Reader/writer for the RMDF binary matrix format.

Layout: 16-byte little-endian header ``b"RMDF"``, version (u32), rows (u32),
cols (u32), followed by ``rows * cols`` float64 values in column-major order.
Vectors are stored as single-column matrices.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatVersionMismatch, StoreError

MAGIC = b"RMDF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def to_bytes(a) -> bytes:
    a = np.asarray(a, dtype="<f8")
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError("RMDF stores 1-D or 2-D arrays only")
    rows, cols = a.shape
    return _HEADER.pack(MAGIC, VERSION, rows, cols) + a.tobytes(order="F")


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise StoreError("RMDF payload shorter than its header")
    magic, version, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise StoreError(f"bad RMDF magic {magic!r}")
    if version != VERSION:
        raise FormatVersionMismatch(f"RMDF version {version}, expected {VERSION}")
    expected = _HEADER.size + 8 * rows * cols
    if len(buf) != expected:
        raise StoreError(f"RMDF payload has {len(buf)} bytes, expected {expected}")
    flat = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
    return flat.reshape((rows, cols), order="F").astype(np.float64)


def write(path, a) -> bytes:
    """Write ``a`` to ``path`` and return the bytes written."""
    data = to_bytes(a)
    Path(path).write_bytes(data)
    return data


def read(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())

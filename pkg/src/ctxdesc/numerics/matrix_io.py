"""CTXM binary matrices: magic, u32 rows, u32 cols, row-major little-endian f32."""
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ctxdesc.errors import FormatError

MATRIX_MAGIC = b"CTXM"
_HEADER = struct.Struct("<4sII")


def encode_matrix(m: np.ndarray) -> bytes:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"only 2-D matrices can be stored, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("matrix contains non-finite values")
    rows, cols = arr.shape
    return _HEADER.pack(MATRIX_MAGIC, rows, cols) + arr.astype("<f4").tobytes(order="C")


def read_matrix(stream: BinaryIO) -> np.ndarray:
    header = stream.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise FormatError("truncated matrix header")
    magic, rows, cols = _HEADER.unpack(header)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"bad matrix magic {magic!r}")
    payload = stream.read(4 * rows * cols)
    if len(payload) != 4 * rows * cols:
        raise FormatError(f"truncated matrix payload, expected {rows}x{cols}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)


def save_matrix(path: str | Path, m: np.ndarray) -> None:
    Path(path).write_bytes(encode_matrix(m))


def load_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_matrix(f)

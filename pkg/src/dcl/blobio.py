"""Binary array container used for datasets and feature dumps.

Layout: 4-byte magic ``DCLD``, u16 version, u8 rank, one u32 per dimension,
then the row-major little-endian float32 payload. The format is deliberately
dumb so round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataCorruptionError, DataFormatError

MAGIC = b"DCLD"
VERSION = 1
_HEADER = struct.Struct("<4sHB")


def write_array(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim == 0 or arr.ndim > 255:
        raise DataFormatError(f"rank {arr.ndim} array not supported")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DataCorruptionError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, rank = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    dims_end = _HEADER.size + 4 * rank
    if len(blob) < dims_end:
        raise DataCorruptionError(f"{path}: truncated dimension list")
    shape = struct.unpack_from(f"<{rank}I", blob, _HEADER.size)
    expected = dims_end + 4 * int(np.prod(shape, dtype=np.int64))
    if len(blob) != expected:
        raise DataCorruptionError(
            f"{path}: payload is {len(blob) - dims_end} bytes, expected {expected - dims_end}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=dims_end)
    return flat.reshape(shape).copy()

"""MXT1 binary tensor format.

Layout: magic ``b"MXT1"``, u8 dtype code (0 = f32), u8 ndim, ndim little-endian
u64 dims, then the row-major little-endian f32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"MXT1"
DTYPE_F32 = 0
_DTYPES = {DTYPE_F32: np.dtype("<f4")}


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise DataError("too many dimensions for MXT1")
    header = MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise DataError("not an MXT1 tensor (bad magic)")
    dtype_code, ndim = struct.unpack_from("<BB", buf, 4)
    if dtype_code not in _DTYPES:
        raise DataError(f"unsupported MXT1 dtype code {dtype_code}")
    offset = 6 + 8 * ndim
    if len(buf) < offset:
        raise DataError("truncated MXT1 header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 6)
    dtype = _DTYPES[dtype_code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) != offset + count * dtype.itemsize:
        raise DataError("MXT1 payload size does not match header dims")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims).copy()


def save(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path: str | Path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tensor {path}: {exc}") from exc
    return decode(buf)

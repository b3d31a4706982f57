"""Binary tensor container (``.estn``).

Layout: magic ``b"ESTN"``, u8 version (1), u8 dtype code (0 = f32, 1 = f64),
u8 ndim, u8 reserved, ``ndim`` little-endian u32 extents, then the raw
little-endian elements in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

MAGIC = b"ESTN"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        code = 1
    elif arr.dtype == np.float32 or np.issubdtype(arr.dtype, np.integer):
        code = 0
    else:
        raise ConfigurationError(f"cannot store dtype {arr.dtype}")
    data = np.ascontiguousarray(arr, dtype=_CODES[code])
    header = MAGIC + struct.pack("<BBBB", VERSION, code, data.ndim, 0)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    return header + data.tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ConfigurationError("not an ESTN tensor container (bad magic)")
    version, code, ndim, _ = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise ConfigurationError(f"unsupported ESTN version {version}")
    if code not in _CODES:
        raise ConfigurationError(f"unknown ESTN dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    offset = 8 + 4 * ndim
    dtype = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) - offset != count * dtype.itemsize:
        raise ConfigurationError(
            f"ESTN payload is {len(buf) - offset} bytes, expected {count * dtype.itemsize}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(arr))


def load(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"tensor file not found: {path}")
    return from_bytes(path.read_bytes())

"""Reader and writer for the MTNS v1 tensor container.

Layout (little endian)::

    bytes 0-3   magic b"MTNS"
    byte  4     version (1)
    byte  5     dtype: 0 = float32, 1 = complex64 (interleaved float32 pairs)
    byte  6     ndim, 1..4
    byte  7     reserved, 0
    ndim x u64  dimension sizes
    payload     row-major values
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .exceptions import DimensionError, FormatError

MAGIC = b"MTNS"
VERSION = 1
DTYPE_REAL = 0
DTYPE_COMPLEX = 1
_NP_DTYPES = {DTYPE_REAL: np.dtype("<f4"), DTYPE_COMPLEX: np.dtype("<c8")}


def encode_tensor(t) -> bytes:
    t = np.asarray(t)
    if not 1 <= t.ndim <= 4:
        raise DimensionError(f"MTNS stores 1 to 4 dimensions, got {t.ndim}")
    code = DTYPE_COMPLEX if np.iscomplexobj(t) else DTYPE_REAL
    payload = np.ascontiguousarray(t, dtype=_NP_DTYPES[code])
    header = MAGIC + struct.pack("<BBBB", VERSION, code, t.ndim, 0)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + payload.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise FormatError("truncated header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    version, code, ndim, _reserved = struct.unpack("<BBBB", buf[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _NP_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise FormatError(f"invalid ndim {ndim}")
    end = 8 + 8 * ndim
    if len(buf) < end:
        raise FormatError("truncated dimension table")
    shape = struct.unpack(f"<{ndim}Q", buf[8:end])
    dtype = _NP_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.uint64)) * dtype.itemsize
    if len(buf) - end != nbytes:
        raise FormatError(f"payload has {len(buf) - end} bytes, expected {nbytes}")
    return np.frombuffer(buf, dtype=dtype, offset=end).reshape(shape).copy()


def write_tensor(path, t) -> None:
    """Write ``t`` to ``path`` in single precision."""
    data = encode_tensor(t)
    with open(os.fspath(path), "wb") as fh:
        fh.write(data)


def read_tensor(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        return decode_tensor(fh.read())

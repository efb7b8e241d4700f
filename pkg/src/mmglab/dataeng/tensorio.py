"""MMGT binary tensor files.

Layout (all little-endian)::

    b"MMGT" | version u8 (=1) | dtype u8 | rank u8 | dims u32 * rank | payload

dtype 0 is float32 (dataset tensors); dtype 1 is float64 (checkpoints).
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"MMGT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_U32_MAX = 2 ** 32 - 1
MAX_PAYLOAD = 2 ** 40


class TensorFormatError(DataError):
    code = "format"


class BadMagicError(TensorFormatError):
    code = "bad-magic"


class TruncatedError(TensorFormatError):
    code = "truncated"


class DimsOverflowError(TensorFormatError):
    code = "dims-overflow"


class UnsupportedError(TensorFormatError):
    code = "unsupported"


def encode_tensor(array: np.ndarray, dtype=np.float32) -> bytes:
    arr = np.asarray(array)
    dt = np.dtype(dtype)
    if dt not in DTYPE_CODES:
        raise UnsupportedError(f"unsupported dtype {dt}")
    if arr.ndim > 255:
        raise DimsOverflowError(f"rank {arr.ndim} does not fit in one byte")
    if any(n > _U32_MAX for n in arr.shape):
        raise DimsOverflowError(f"dimension too large for u32: {arr.shape}")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPES[DTYPE_CODES[dt]]).tobytes(order="C")
    return header + payload


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic")
    if len(blob) < 7:
        raise TruncatedError(f"{source}: truncated header")
    version, code, rank = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise UnsupportedError(f"{source}: unsupported version {version}")
    if code not in DTYPES:
        raise UnsupportedError(f"{source}: unknown dtype code {code}")
    off = 7 + 4 * rank
    if len(blob) < off:
        raise TruncatedError(f"{source}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, 7)
    dt = DTYPES[code]
    count = 1
    for n in dims:
        count *= n
    nbytes = count * dt.itemsize
    if nbytes > MAX_PAYLOAD:
        raise DimsOverflowError(f"{source}: dims {dims} imply a {nbytes}-byte payload")
    if len(blob) - off < nbytes:
        raise TruncatedError(f"{source}: payload has {len(blob) - off} bytes, expected {nbytes}")
    if len(blob) - off > nbytes:
        raise TensorFormatError(f"{source}: {len(blob) - off - nbytes} trailing bytes")
    return np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(dims).copy()


def write_tensor(path: str | os.PathLike, tensor, dtype=np.float32) -> None:
    data = getattr(tensor, "data", tensor)
    Path(path).write_bytes(encode_tensor(np.asarray(data), dtype))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DataError(f"tensor file not found: {p}")
    return decode_tensor(p.read_bytes(), str(p))

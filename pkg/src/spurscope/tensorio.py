"""Binary formats: the native DSTF tensor file and big-endian IDX (MNIST family).

DSTF layout (little-endian)::

    b"DSTF" | u8 dtype (1=f32, 2=f64, 3=u32) | u8 rank | u16 reserved=0
    | rank x u64 dims | row-major payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

DSTF_MAGIC = b"DSTF"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u4")}
_DTYPES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint32): 3}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


class WrongMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


def encode_tensor(arr) -> bytes:
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    code = _DTYPES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32, float64 or uint32")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    header = DSTF_MAGIC + struct.pack("<BBH", code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode_tensor(buf: bytes) -> tuple:
    """Decode one tensor from the start of ``buf``; return ``(array, bytes consumed)``."""
    if len(buf) < 8:
        raise TruncatedError("DSTF header truncated")
    if buf[:4] != DSTF_MAGIC:
        raise WrongMagicError(f"bad DSTF magic {buf[:4]!r}")
    code, rank, reserved = struct.unpack_from("<BBH", buf, 4)
    if code not in _CODES:
        raise FormatError(f"bad DSTF dtype code {code}")
    if reserved != 0:
        raise FormatError("DSTF reserved field must be 0")
    off = 8 + 8 * rank
    if len(buf) < off:
        raise TruncatedError("DSTF dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    dtype = _CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < off + nbytes:
        raise TruncatedError(f"DSTF payload length mismatch: need {nbytes} bytes, have {len(buf) - off}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True), off + nbytes


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, used = decode_tensor(buf)
    if used != len(buf):
        raise FormatError(f"DSTF payload length mismatch: {len(buf) - used} trailing bytes")
    return arr


def _read_idx(path, magic: int, what: str) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise TruncatedError(f"IDX {what} header truncated")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise WrongMagicError(f"wrong magic 0x{got:08x} in IDX {what} file (expected 0x{magic:08x})")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise TruncatedError(f"IDX {what} header truncated")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    off = 4 + 4 * ndim
    n = int(np.prod(dims))
    if len(buf) - off < n:
        raise TruncatedError(f"IDX {what} payload truncated: need {n} bytes, have {len(buf) - off}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(path, IDX_IMAGES_MAGIC, "images")


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC, "labels")


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())

"""BTEN binary tensor files.

Layout: magic ``BTEN``, u8 version (1), u8 dtype code (0 = f32, 1 = f64),
u8 rank, ``rank`` little-endian u64 extents, then the row-major element
stream in little-endian byte order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ..errors import FormatError, PrecisionMismatchError

MAGIC = b"BTEN"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dumps(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    native = arr.dtype.newbyteorder("=")
    if native not in _CODES:
        raise FormatError(f"BTEN stores only float32/float64, got {arr.dtype}")
    code = _CODES[native]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def loads(buf: bytes, expect_dtype=None, label: str = "tensor") -> np.ndarray:
    """Decode one BTEN payload.

    Raises FormatError on bad magic, version, dtype code or length, and
    PrecisionMismatchError if ``expect_dtype`` is given and differs.
    """
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError(f"{label}: bad magic, not a BTEN payload")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"{label}: unsupported BTEN version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{label}: unknown dtype code {code}")
    offset = 7 + 8 * rank
    if len(buf) < offset:
        raise FormatError(f"{label}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 7)
    dtype = _DTYPES[code]
    if expect_dtype is not None and np.dtype(expect_dtype) != dtype.newbyteorder("="):
        raise PrecisionMismatchError(
            f"{label}: stored as {dtype.newbyteorder('=').name}, requested {np.dtype(expect_dtype).name}"
        )
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"{label}: payload is {len(buf)} bytes, header implies {expected}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(dumps(array))


def load(path, expect_dtype=None) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path.name}: cannot read ({exc.strerror})") from exc
    return loads(buf, expect_dtype=expect_dtype, label=path.name)


def write(stream: BinaryIO, array: np.ndarray) -> None:
    stream.write(dumps(array))

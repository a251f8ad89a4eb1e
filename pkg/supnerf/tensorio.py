"""SUPT tensor files.

    "SUPT" | u8 dtype (1 = f64, 2 = u8) | u32 rank | rank × u64 extent | little-endian payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from supnerf.constants import DTYPE_F64, DTYPE_U8, TENSOR_MAGIC
from supnerf.errors import TensorFileError

_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_U8: np.dtype("u1")}
_CODES = {np.dtype(np.float64): DTYPE_F64, np.dtype(np.uint8): DTYPE_U8}
_HEADER = struct.Struct("<4sBI")


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TensorFileError(f"unsupported dtype {arr.dtype} (only float64 and uint8)")
    header = _HEADER.pack(TENSOR_MAGIC, code, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + extents + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TensorFileError(f"{source}: truncated header")
    magic, code, rank = _HEADER.unpack_from(buf)
    if magic != TENSOR_MAGIC:
        raise TensorFileError(f"{source}: bad magic {magic!r}")
    dtype = _DTYPES.get(code)
    if dtype is None:
        raise TensorFileError(f"{source}: unknown dtype code {code}")
    offset = _HEADER.size + 8 * rank
    if len(buf) < offset:
        raise TensorFileError(f"{source}: truncated shape")
    shape = struct.unpack_from(f"<{rank}Q", buf, _HEADER.size)
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset != expected:
        raise TensorFileError(
            f"{source}: payload is {len(buf) - offset} bytes, shape {shape} needs {expected}"
        )
    arr = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(shape)
    return arr.astype(np.float64 if code == DTYPE_F64 else np.uint8)


def write_tensor(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))


def read_tensor(path: Path) -> np.ndarray:
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise TensorFileError(f"{path}: {e.strerror or e}") from e
    return decode_tensor(buf, str(path))

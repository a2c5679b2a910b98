"""``AVFT`` tensor files: a 16-byte header, the dims, then float32 LE data.

Header layout: magic ``b"AVFT"``, rank (u32), element count (u64); followed by
``rank`` u32 dims and the row-major payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVFT"
_HEADER = struct.Struct("<4sIQ")


class TensorFileError(IOError):
    pass


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, array.ndim, array.size))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TensorFileError(f"{path}: truncated header")
    magic, rank, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFileError(f"{path}: bad magic {magic!r}")
    dims_end = _HEADER.size + 4 * rank
    shape = struct.unpack_from(f"<{rank}I", data, _HEADER.size)
    if int(np.prod(shape, dtype=np.int64)) != count or len(data) != dims_end + 4 * count:
        raise TensorFileError(f"{path}: size mismatch for shape {shape}")
    return np.frombuffer(data, dtype="<f4", offset=dims_end).reshape(shape).astype(np.float32)

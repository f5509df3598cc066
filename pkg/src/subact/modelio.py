"""Binary tensor container shared by the CNN and SVM model files.

Layout: magic ``SACNN1\\0``, arity (u32), then for each tensor its rank (u32),
its dims (u32 each) and row-major little-endian float32 data, until EOF.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"SACNN1\0"


class ModelFormatError(Exception):
    pass


def write_tensors(path: str | os.PathLike, arity: int, tensors: list[np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arity))
        for t in tensors:
            a = np.ascontiguousarray(t, dtype="<f4")
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def read_tensors(path: str | os.PathLike) -> tuple[int, list[np.ndarray]]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {buf[:len(MAGIC)]!r}")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ModelFormatError(f"{path}: truncated file at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (arity,) = struct.unpack("<I", take(4))
    tensors = []
    while pos < len(buf):
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise ModelFormatError(f"{path}: implausible tensor rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32)
        tensors.append(data.reshape(dims))
    return arity, tensors

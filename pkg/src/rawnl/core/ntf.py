"""NTF tensor files: ``NTENSOR1`` magic, u32 rank, u32 extents, float32 payload (all little-endian)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTENSOR1"


class NTFError(ValueError):
    pass


def to_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise NTFError("bad magic, not an NTF tensor file")
    if len(buf) < 12:
        raise NTFError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, 8)
    off = 12 + 4 * rank
    if len(buf) < off:
        raise NTFError("truncated shape")
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - off != 4 * count:
        raise NTFError(f"payload has {len(buf) - off} bytes, expected {4 * count} for shape {shape}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(array))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())

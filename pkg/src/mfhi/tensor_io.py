"""Binary tensor container.

Layout (all little-endian)::

    b"MFT1" | uint32 rank | rank x uint32 extent | prod(extents) x float32

Payload is row-major.  Rank is limited to 4 and every extent must be >= 1.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"MFT1"
MAX_RANK = 4
_U32 = struct.Struct("<I")

PathLike = Union[str, os.PathLike]


class TensorFormatError(ValueError):
    """Malformed container; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > MAX_RANK:
        raise ValueError(f"rank {arr.ndim} exceeds the container limit of {MAX_RANK}")
    if arr.ndim == 0:
        raise ValueError("scalars must be stored with rank >= 1")
    if any(n < 1 for n in arr.shape):
        raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
    if any(n > 0xFFFFFFFF for n in arr.shape):
        raise ValueError(f"extent overflow in shape {arr.shape}")
    header = MAGIC + _U32.pack(arr.ndim) + b"".join(_U32.pack(n) for n in arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise TensorFormatError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r}", 0)
    (rank,) = _U32.unpack_from(buf, 4)
    if rank < 1 or rank > MAX_RANK:
        raise TensorFormatError(f"unsupported rank {rank}", 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise TensorFormatError("truncated extents", len(buf))
    shape = tuple(_U32.unpack_from(buf, 8 + 4 * i)[0] for i in range(rank))
    for i, n in enumerate(shape):
        if n < 1:
            raise TensorFormatError(f"extent {i} is zero", 8 + 4 * i)
    count = 1
    for n in shape:
        count *= n
    expected = head + 4 * count
    if len(buf) < expected:
        raise TensorFormatError(f"truncated payload: need {expected} bytes, found {len(buf)}", len(buf))
    if len(buf) > expected:
        raise TensorFormatError(f"{len(buf) - expected} trailing bytes", expected)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=head).reshape(shape).astype(np.float32)


def write_tensor(path: PathLike, array) -> Path:
    path = Path(path)
    path.write_bytes(encode_tensor(array))
    return path


def read_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def tensor_io(mode: str, path: PathLike, tensor=None):
    """Single entry point: ``tensor_io("write", p, t)`` / ``tensor_io("read", p)``."""
    if mode == "write":
        return write_tensor(path, tensor)
    if mode == "read":
        return read_tensor(path)
    raise ValueError(f"mode must be 'read' or 'write', got {mode!r}")

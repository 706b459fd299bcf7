"""Named-tensor container files.

Layout: the 8-byte magic ``LITCKPT1``, then one record per tensor until
end of file. Each record is a u64 little-endian name length, the UTF-8
name, a u64 rank, the extents as u64 little-endian, and the data as
float32 little-endian in row-major order. Round-trips are bit-exact for
float32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ValidationError

MAGIC = b"LITCKPT1"
_U64 = struct.Struct("<Q")


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays (cast to float32) in insertion order."""
    path = Path(path)
    seen: set[str] = set()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            if name in seen:
                raise ValidationError(f"duplicate tensor name {name!r}")
            seen.add(name)
            raw = name.encode("utf-8")
            data = np.asarray(arr, dtype="<f4")
            if not data.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
                data = np.ascontiguousarray(data)
            fh.write(_U64.pack(len(raw)))
            fh.write(raw)
            fh.write(_U64.pack(data.ndim))
            for extent in data.shape:
                fh.write(_U64.pack(extent))
            fh.write(data.tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container written by :func:`save_tensors`."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path} is not a LITCKPT1 container")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)

    def read_u64() -> int:
        nonlocal pos
        if pos + 8 > len(blob):
            raise ValidationError(f"{path}: truncated container")
        (value,) = _U64.unpack_from(blob, pos)
        pos += 8
        return value

    while pos < len(blob):
        name_len = read_u64()
        if pos + name_len > len(blob):
            raise ValidationError(f"{path}: truncated tensor name")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rank = read_u64()
        shape = tuple(read_u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * count
        if pos + nbytes > len(blob):
            raise ValidationError(f"{path}: truncated data for tensor {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += nbytes
        if name in out:
            raise ValidationError(f"{path}: duplicate tensor name {name!r}")
        out[name] = arr.copy()
    return out

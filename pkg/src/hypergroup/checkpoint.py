"""Portable checkpoint files.

Layout (all integers little-endian)::

    magic    8 bytes  b"HYGMACKP"
    version  uint32   currently 1
    count    uint32   number of tensors
    count x:
        name_len uint32, name (utf-8), rank uint32, dims uint64 * rank,
        payload float64 * prod(dims), C order

Writes go through a temporary file and an atomic rename, so a reader never
sees a half-written checkpoint.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HYGMACKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
            pos += 8 * size
    except struct.error:
        raise CheckpointError(f"{path}: truncated checkpoint") from None
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return out

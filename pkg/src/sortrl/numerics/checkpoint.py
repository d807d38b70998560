"""Binary parameter checkpoints.

Layout (little-endian): magic ``SRTL``, format version u32, parameter count
u32, then per parameter: name length u32 + UTF-8 name, rank u32, rank x u64
dims, float64 data.
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"SRTL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:4] != MAGIC:
        raise CheckpointError("not a parameter checkpoint (bad magic)")
    pos = 4
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64)
            pos += 8 * size
            out[name] = arr.reshape(dims)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last parameter")
    return out


def save(path, arrays) -> None:
    Path(path).write_bytes(encode(arrays))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())

"""Binary checkpoint container for named float64 arrays.

Layout (all integers little-endian)::

    magic      8 bytes   b"TNETCKPT"
    version    uint32    currently 1
    count      uint32    number of records
    record*    name_len uint32, name UTF-8 bytes,
               ndim uint32, ndim x uint32 extents,
               prod(extents) x float64 values (row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TNETCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: record {name!r} truncated at byte {pos}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out

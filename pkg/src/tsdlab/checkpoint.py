"""Named-tensor container used for checkpoints, datasets and embeddings.

Layout (all integers little-endian)::

    magic   8 bytes  b"TSDTENS\\0"
    version u32
    count   u32
    count x {
        name_len u32, name utf-8,
        ndim u32, dims u64 * ndim,
        data float64 little-endian, row-major
    }
"""
from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"TSDTENS\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(blob):
                raise CheckpointError(f"truncated data for {name!r}")
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"truncated container: {exc}") from exc
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())

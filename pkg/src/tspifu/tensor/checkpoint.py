"""PFW1 named-tensor container.

Layout (all little-endian)::

    b"PFW1"  u32 count
    repeated: u32 name_len, name (utf-8), u32 rank, u32 extents[rank], f32 payload
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PFW1"


class CheckpointError(ValueError):
    pass


def dumps(tensors):
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError("not a PFW1 checkpoint")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        if pos + 4 * size > len(buf):
            raise CheckpointError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last record")
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())

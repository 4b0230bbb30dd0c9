"""Portable little-endian weights file.

Layout: ``b"DCTW"``, u32 version, u32 tensor count, then per tensor a u16 name
length, the UTF-8 name, a u8 rank, u32 extents and float32 data in row-major
order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DCTW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def dumps(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise WeightsFormatError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        raise WeightsFormatError("missing DCTW magic")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise WeightsFormatError(f"unsupported version {version}")
        pos, out = 12, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise WeightsFormatError(f"tensor {name!r} runs past end of file")
            if name in out:
                raise WeightsFormatError(f"duplicate tensor name {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise WeightsFormatError(f"truncated weights file: {exc}") from None
    if pos != len(buf):
        raise WeightsFormatError(f"{len(buf) - pos} trailing bytes")
    return out


def save_weights(tensors: dict, path) -> None:
    Path(path).write_bytes(dumps(tensors))


def load_weights(path) -> dict:
    return loads(Path(path).read_bytes())

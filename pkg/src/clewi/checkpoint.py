"""Binary checkpoint format for ParamSets.

Layout (all integers little-endian)::

    b"CLWI"                      magic
    u16   version (= 1)
    u32   length of architecture JSON, then that many UTF-8 bytes
    u32   number of entries
    per entry:
        u16  name length, UTF-8 name
        u8   dtype tag (1 = float32)
        u8   rank
        u32  x rank dims
    payloads: each entry's values as little-endian float32, in table order

Names are keys; the table order in a file does not need to match the layout
order of the architecture.
"""

from __future__ import annotations

import json
import struct
from typing import Optional, Sequence

import numpy as np

from .models import ModelArch, ParamSet

MAGIC = b"CLWI"
VERSION = 1
DTYPE_F32 = 1


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


def save_checkpoint(params: ParamSet, order: Optional[Sequence[str]] = None) -> bytes:
    names = list(order) if order is not None else params.names()
    if sorted(names) != sorted(params.names()):
        raise ValueError("order must be a permutation of the parameter names")
    arch = json.dumps(params.arch.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(arch)), arch,
             struct.pack("<I", len(names))]
    for name in names:
        arr = params[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        parts.append(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(buf: bytes) -> ParamSet:
    r = _Reader(bytes(buf))
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic; not a CLWI checkpoint")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (alen,) = r.unpack("<I")
    try:
        arch = ModelArch.from_dict(json.loads(r.take(alen).decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt architecture header: {exc}") from exc
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt name table") from exc
        tag, rank = r.unpack("<BB")
        if tag != DTYPE_F32:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        table.append((name, r.unpack(f"<{rank}I")))
    tensors = {}
    for name, shape in table:
        if name in tensors:
            raise CheckpointError(f"duplicate entry {name!r}")
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after payload")
    try:
        return ParamSet(arch, tensors)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc

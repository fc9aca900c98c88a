"""Binary container shared by H-Net, perceptual-net and detector checkpoints.

Layout (little-endian throughout)::

    magic            4 bytes   b"HNET" | b"PNET" | b"DTCT" | b"HOPT"
    format_version   u32
    [variant]        u8        present only when the caller asks for it (detectors)
    n_fields         u32
      name_len u16, name utf-8, value_len u32, value utf-8 (JSON)
    n_tensors        u32
      name_len u16, name utf-8, ndim u8, dims u32 * ndim, float32 data
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError, CheckpointMagicError, CheckpointTruncatedError, CheckpointVersionError

FORMAT_VERSION = 1


@dataclass
class Container:
    magic: bytes
    fields: dict[str, Any]
    tensors: dict[str, np.ndarray]
    version: int = FORMAT_VERSION
    variant: int | None = None


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def encode(c: Container) -> bytes:
    if len(c.magic) != 4:
        raise ValueError(f"magic must be 4 bytes, got {c.magic!r}")
    buf = io.BytesIO()
    buf.write(c.magic)
    buf.write(struct.pack("<I", c.version))
    if c.variant is not None:
        buf.write(struct.pack("<B", c.variant))
    buf.write(struct.pack("<I", len(c.fields)))
    for key, value in c.fields.items():
        _put_str(buf, key)
        raw = json.dumps(value, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    buf.write(struct.pack("<I", len(c.tensors)))
    for name, arr in c.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        _put_str(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.raw)}"
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def decode(raw: bytes, magic: bytes, has_variant: bool = False, version: int = FORMAT_VERSION) -> Container:
    r = _Reader(raw)
    if len(raw) < 4 or raw[:4] != magic:
        raise CheckpointMagicError(f"expected magic {magic!r}, found {raw[:4]!r}")
    r.take(4)
    (found_version,) = r.unpack("<I")
    if found_version != version:
        raise CheckpointVersionError(f"format_version {found_version} unsupported (expected {version})")
    variant = r.unpack("<B")[0] if has_variant else None
    (n_fields,) = r.unpack("<I")
    fields: dict[str, Any] = {}
    for _ in range(n_fields):
        key = r.string()
        (n,) = r.unpack("<I")
        fields[key] = json.loads(r.take(n).decode("utf-8"))
    (n_tensors,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = data
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after last tensor")
    return Container(magic=magic, fields=fields, tensors=tensors, version=found_version, variant=variant)


def write(path: str | Path, c: Container) -> None:
    Path(path).write_bytes(encode(c))


def read(path: str | Path, magic: bytes, has_variant: bool = False) -> Container:
    return decode(Path(path).read_bytes(), magic, has_variant)

"""Binary checkpoints of named parameter vectors, stored little-endian at single precision.

Layout::

    magic "GGCK" | u32 version | u32 kind | u32 entry count
    per entry: u16 name length | utf-8 name | u8 is_buffer | u32 ndim | u32 dims[ndim]
               | f32 little-endian payload (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import ParamVector

MAGIC = b"GGCK"
VERSION = 1
KINDS = {"generator": 1, "discriminator": 2, "encoder": 3, "decoder": 4}
_KIND_NAMES = {v: k for k, v in KINDS.items()}
_HEAD = struct.Struct("<4sIII")


class CheckpointError(ValueError):
    """Malformed checkpoint or a kind tag that does not match the expected model."""


def encode_checkpoint(params: ParamVector, kind: str) -> bytes:
    if kind not in KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    items = [(n, a, 0) for n, a in params.entries.items()] + [(n, a, 1) for n, a in params.buffers.items()]
    parts = [_HEAD.pack(MAGIC, VERSION, KINDS[kind], len(items))]
    for name, arr, is_buf in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<BI{arr.ndim}I", is_buf, arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(blob: bytes, expected_kind: str | None = None) -> tuple[str, ParamVector]:
    def need(pos: int, n: int) -> None:
        if pos + n > len(blob):
            raise CheckpointError("checkpoint is truncated")

    need(0, _HEAD.size)
    magic, version, kind_id, count = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = _KIND_NAMES.get(kind_id)
    if kind is None:
        raise CheckpointError(f"unknown kind tag {kind_id}")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"checkpoint holds a {kind}, expected a {expected_kind}")
    pos = _HEAD.size
    entries, buffers = {}, {}
    for _ in range(count):
        need(pos, 2)
        (n_name,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(pos, n_name + 5)
        name = blob[pos : pos + n_name].decode("utf-8")
        pos += n_name
        is_buf, ndim = struct.unpack_from("<BI", blob, pos)
        pos += 5
        need(pos, 4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        need(pos, 4 * size)
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * size
        (buffers if is_buf else entries)[name] = arr
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the last entry")
    return kind, ParamVector(entries, buffers)


def save_checkpoint(path, params: ParamVector, kind: str) -> int:
    """Write ``params``; returns the file size in bytes."""
    blob = encode_checkpoint(params, kind)
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path, expected_kind: str | None = None) -> ParamVector:
    return decode_checkpoint(Path(path).read_bytes(), expected_kind)[1]

"""Binary checkpoint format.

Layout (little-endian)::

    "ASAN" | u32 version=1 | u64 iteration | f64 best_miou | u32 tensor_count
    per tensor: u16 name_len | name (utf-8) | u8 rank | u32 dims[rank] | f32 data

The configuration echo lives next to the binary file as ``<path>.json``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError, DataError
from .network import ModelParams
from .tensor import Tensor

MAGIC = b"ASAN"
VERSION = 1
_HEAD = struct.Struct("<4sIQdI")


@dataclass
class Checkpoint:
    params: ModelParams
    iteration: int = 0
    best_miou: float = float("nan")
    config: dict = field(default_factory=dict)
    version: int = VERSION


def encode(ckpt: Checkpoint) -> bytes:
    parts = [_HEAD.pack(MAGIC, ckpt.version, ckpt.iteration, ckpt.best_miou, len(ckpt.params))]
    for name, t in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> Checkpoint:
    try:
        return _decode(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from exc


def _decode(blob: bytes) -> Checkpoint:
    if len(blob) < _HEAD.size:
        raise DataError("checkpoint truncated")
    magic, version, iteration, best, count = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = _HEAD.size
    params = ModelParams()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        params[name] = Tensor(data.astype(np.float32), requires_grad=True)
    if off != len(blob):
        raise DataError(f"checkpoint has {len(blob) - off} trailing bytes")
    return Checkpoint(params, iteration, best, version=version)


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.write_bytes(encode(ckpt))
    Path(str(path) + ".json").write_text(json.dumps(ckpt.config, indent=2, sort_keys=True) + "\n")


def load(path) -> Checkpoint:
    path = Path(path)
    ckpt = decode(path.read_bytes())
    side = Path(str(path) + ".json")
    if side.exists():
        ckpt.config = json.loads(side.read_text())
    return ckpt

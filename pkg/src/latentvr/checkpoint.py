"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic      8 bytes  b"LATVRCK\\0"
    version    u32
    config     u32 length + UTF-8 "key=value" lines (ModelConfig)
    meta       u32 length + UTF-8 JSON (training state; "{}" when absent)
    count      u32
    tensors    count x (u16 name length, name, u8 dtype length, dtype,
                        u8 ndim, ndim x u64 shape, raw little-endian payload)

Tensors are stored in the order given, and loading returns them in file order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"LATVRCK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_block(cfg: ModelConfig) -> bytes:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k}={json.dumps(v)}")
    return "\n".join(lines).encode()


def _parse_config(text: str) -> ModelConfig:
    values = {}
    for line in text.splitlines():
        key, sep, raw = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        values[key] = json.loads(raw)
    return ModelConfig.from_dict(values)


def save(path, cfg: ModelConfig, tensors: dict, meta: dict | None = None) -> None:
    """Write ``tensors`` (name -> array) with the model config and JSON ``meta``."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for blob in (_config_block(cfg), json.dumps(meta or {}, sort_keys=True).encode()):
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        n, dt = name.encode(), le.dtype.str.encode()
        parts += [struct.pack("<H", len(n)), n, struct.pack("<B", len(dt)), dt,
                  struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}Q", *arr.shape),
                  np.ascontiguousarray(le).tobytes()]
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load(path):
    """Return ``(ModelConfig, tensors, meta)``."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack("<I", take(4))
    cfg = _parse_config(take(n).decode())
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(take(n).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (ld,) = struct.unpack("<B", take(1))
        dtype = np.dtype(take(ld).decode())
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(size), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return cfg, tensors, meta

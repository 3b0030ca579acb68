"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CLMQ"                 4 bytes magic
    version                 u32, currently 1
    metadata_length         u64
    metadata                UTF-8 JSON: {"config": {...},
                                         "tensors": [{"name", "shape", "offset"}, ...]}
    payload                 concatenated float32 tensors, offsets relative to payload start
    digest                  u64 FNV-1a (64-bit) of the payload bytes
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import CorruptCheckpoint, SchemaError
from .model import Checkpoint, ModelConfig, tensor_shapes

MAGIC = b"CLMQ"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    table = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    meta = json.dumps({"config": ckpt.config.to_dict(), "tensors": table}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(meta)))
        f.write(meta)
        f.write(payload)
        f.write(struct.pack("<Q", fnv1a64(payload)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptCheckpoint(f"{os.fspath(path)}: bad magic")
    version, meta_len = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    start = 16
    if start + meta_len + 8 > len(blob):
        raise CorruptCheckpoint("truncated checkpoint")
    try:
        meta = json.loads(blob[start : start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable metadata: {exc}") from None
    payload = blob[start + meta_len : -8]
    (digest,) = struct.unpack("<Q", blob[-8:])
    if fnv1a64(payload) != digest:
        raise CorruptCheckpoint("payload digest mismatch")

    try:
        config = ModelConfig.from_dict(meta["config"])
        table = meta["tensors"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed metadata: {exc}") from None
    expected = tensor_shapes(config)
    tensors = {}
    for entry in table:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if expected.get(name) != shape:
            raise SchemaError(f"{name}: shape {shape} does not match config ({expected.get(name)})")
        nbytes = 4 * int(np.prod(shape))
        if off < 0 or off + nbytes > len(payload):
            raise CorruptCheckpoint(f"{name}: payload range out of bounds")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
    if set(tensors) != set(expected):
        raise SchemaError(f"tensor set mismatch: missing={sorted(set(expected) - set(tensors))}")
    return Checkpoint(config, {name: tensors[name] for name in expected})

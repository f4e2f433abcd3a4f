"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"EPCK"
    4       4     u32 format version (1)
    8       4     u32 header length L in bytes
    12      L     UTF-8 JSON header, keys sorted, no whitespace
    12+L    ...   parameter payloads, float32 little-endian, C order,
                  concatenated in header order

The header holds ``config`` (every ModelConfig field), ``catalog`` (variable
codes in embedding order), ``parameters`` (list of ``[name, shape]``),
``rng_state`` (numpy bit-generator state or null), ``epoch`` and a free-form
``meta`` dict. Writing the same state twice gives identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import EcoPerceiver, ModelConfig

MAGIC = b"EPCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict                      # name -> np.ndarray (float32)
    epoch: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: EcoPerceiver, epoch: int = 0, rng_state=None, meta=None) -> "Checkpoint":
        params = {k: v.data.astype("<f4") for k, v in model.params.items()}
        return cls(model.cfg, params, epoch, rng_state, dict(meta or {}))

    def to_model(self, dtype=None) -> EcoPerceiver:
        model = EcoPerceiver(self.config, dtype=dtype)
        model.load_state(self.params)
        return model


def _header(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config
    doc = {
        "catalog": [v.code for v in cfg.variables()],
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_dict().items()},
        "epoch": int(ckpt.epoch),
        "meta": ckpt.meta,
        "parameters": [[name, list(np.shape(arr))] for name, arr in ckpt.params.items()],
        "rng_state": ckpt.rng_state,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(ckpt: Checkpoint) -> bytes:
    header = _header(ckpt)
    chunks = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    for arr in ckpt.params.values():
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"checkpoint too short ({len(blob)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointError("checkpoint header is truncated")
    try:
        doc = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    cfg = ModelConfig.from_dict(doc["config"])
    catalog = [v.code for v in cfg.variables()]
    if doc["catalog"] != catalog:
        raise CheckpointError("variable catalog in checkpoint does not match its config")
    offset = start + hlen
    params = {}
    for name, shape in doc["parameters"]:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * n
        if end > len(blob):
            raise CheckpointError(f"payload truncated inside parameter {name!r}")
        params[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after the last parameter")
    return Checkpoint(cfg, params, doc["epoch"], doc["rng_state"], doc.get("meta", {}))


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(ckpt))
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())

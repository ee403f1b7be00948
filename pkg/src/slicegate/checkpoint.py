"""Shared binary weight container for baseline and temporal models.

Layout (all integers little-endian):

    magic    4 bytes  b"SGCP"
    version  u32      currently 1
    count    u32      number of tensors
    meta_len u32      length of the UTF-8 JSON metadata that follows
    meta     bytes    {"kind": ..., "seed": ..., "config": {...}}
    entries  count *  [name_len u16][name utf-8][ndim u8][dims u32 * ndim]
                      [offset u32]
    payload  bytes    concatenated float32 little-endian tensor data

Offsets index into the payload section. Entries are sorted by name so a
fixed parameter set always produces byte-identical files. Baseline and
temporal checkpoints are mutually loadable: "adapter."-prefixed tensors
may be absent from the file (they stay at their initialization) or absent
from the model (they are ignored).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from slicegate.errors import DataError
from slicegate.model import ModelConfig

MAGIC = b"SGCP"
VERSION = 1
ADAPTER_PREFIX = "adapter."


class CheckpointFormatError(DataError):
    pass


def save_checkpoint(path, model) -> None:
    meta = {
        "kind": model.kind,
        "seed": model.seed,
        "config": _config_to_dict(model.config),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    names = sorted(model.params)
    entries = bytearray()
    payload = bytearray()
    for name in names:
        data = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        name_b = name.encode("utf-8")
        entries += struct.pack("<H", len(name_b)) + name_b
        entries += struct.pack("<B", data.ndim)
        entries += struct.pack(f"<{data.ndim}I", *data.shape)
        entries += struct.pack("<I", len(payload))
        payload += data.tobytes()
    blob = MAGIC + struct.pack("<III", VERSION, len(names), len(meta_bytes))
    blob += meta_bytes + bytes(entries) + bytes(payload)
    Path(path).write_bytes(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (meta, name -> float32 array)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    version, count, meta_len = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint version {version}, reader supports {VERSION}")
    pos = 16
    try:
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        headers = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            headers.append((name, shape, offset))
        payload = raw[pos:]
        tensors = {}
        for name, shape, offset in headers:
            n = int(np.prod(shape)) if shape else 1
            end = offset + 4 * n
            if end > len(payload):
                raise CheckpointFormatError(f"{path}: truncated tensor data for {name}")
            tensors[name] = np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: truncated or corrupt checkpoint") from exc
    return meta, tensors


def load_checkpoint(path, model) -> dict:
    """Copy stored tensors into the model's parameters by name.

    Adapter tensors may be missing (baseline file into a temporal model:
    the adapter keeps its init) or extra (temporal file into a baseline).
    Any other name or shape mismatch is an error. Returns the metadata.
    """
    meta, tensors = read_checkpoint(path)
    for name, param in model.params.items():
        if name not in tensors:
            if name.startswith(ADAPTER_PREFIX):
                continue
            raise CheckpointFormatError(f"{path}: missing tensor {name}")
        stored = tensors[name]
        if stored.shape != param.data.shape:
            raise CheckpointFormatError(
                f"{path}: shape mismatch for {name}: {stored.shape} vs {param.data.shape}")
        param.data = stored.astype(model.config.np_dtype)
    for name in tensors:
        if name not in model.params and not name.startswith(ADAPTER_PREFIX):
            raise CheckpointFormatError(f"{path}: unexpected tensor {name}")
    return meta


def build_model_from_checkpoint(path):
    """Reconstruct the model (kind, config, seed) stored in a checkpoint."""
    from slicegate.adapter import TemporalModel
    from slicegate.model import BaselineModel

    meta, _ = read_checkpoint(path)
    config = config_from_dict(meta["config"])
    cls = TemporalModel if meta["kind"] == "temporal" else BaselineModel
    model = cls(config, seed=int(meta["seed"]))
    load_checkpoint(path, model)
    return model


def _config_to_dict(config: ModelConfig) -> dict:
    d = dataclasses.asdict(config)
    d["class_names"] = list(config.class_names)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["class_names"] = tuple(d["class_names"])
    return ModelConfig(**d)

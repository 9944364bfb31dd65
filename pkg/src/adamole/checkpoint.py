"""Binary checkpoints.

Layout (all little-endian)::

    8 bytes   magic  b"ADAMOLE\\0"
    u32       format version
    u32       header length in bytes
    header    UTF-8 JSON: model description + parameter manifest
    data      float64 values, one block per manifest entry at its offset

Offsets are relative to the start of the data section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import RoutedClassifier, ToyModel, ToyModelConfig
from .moe_layer import MixMode

MAGIC = b"ADAMOLE\0"
VERSION = 1
_LE_F64 = np.dtype("<f8")


def describe_model(model) -> dict:
    if isinstance(model, ToyModel):
        return {"kind": "transformer", "config": model.cfg.to_dict()}
    if isinstance(model, RoutedClassifier):
        return {"kind": "router", "config": dict(model.spec)}
    raise ConfigError(f"cannot checkpoint {type(model).__name__}")


def model_from_description(desc: dict):
    cfg = dict(desc["config"])
    mode = MixMode.from_dict(cfg.pop("mode"))
    if desc["kind"] == "transformer":
        return ToyModel(ToyModelConfig(mode=mode, **cfg))
    if desc["kind"] == "router":
        return RoutedClassifier(mode=mode, **cfg)
    raise ConfigError(f"unknown model kind {desc['kind']!r}")


def to_bytes(model, extra: dict | None = None) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for p in model.parameters():
        blob = np.ascontiguousarray(p.value, dtype=_LE_F64).tobytes()
        manifest.append({"name": p.name, "shape": list(p.value.shape), "offset": offset,
                         "trainable": p.trainable})
        blobs.append(blob)
        offset += len(blob)
    header = {"model": describe_model(model), "params": manifest, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(buf: bytes):
    """Rebuilds the model described in the header and fills in every parameter."""
    if buf[:8] != MAGIC:
        raise ConfigError("not an adamole checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", buf[8:16])
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    data = memoryview(buf)[16 + hlen:]
    model = model_from_description(header["model"])
    params = model.named_parameters()
    names = {e["name"] for e in header["params"]}
    if names != set(params):
        raise ConfigError("checkpoint parameter manifest does not match the model layout")
    for entry in header["params"]:
        p = params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != p.value.shape:
            raise ConfigError(f"{entry['name']}: checkpoint shape {shape} != model shape {p.value.shape}")
        n = int(np.prod(shape)) if shape else 1
        if entry["offset"] + 8 * n > len(data):
            raise ConfigError(f"checkpoint truncated inside {entry['name']}")
        arr = np.frombuffer(data, dtype=_LE_F64, count=n, offset=entry["offset"])
        p.value = arr.astype(np.float64).reshape(shape)
        p.grad = np.zeros_like(p.value)
    return model, header.get("extra", {})


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, extra))


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes())

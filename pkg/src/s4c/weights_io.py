"""``S4CW`` weight container.

Layout (all little-endian)::

    b"S4CW" | u16 version | u32 metadata length | UTF-8 JSON metadata | float32 payloads

The metadata carries the model spec and an ordered manifest of
``[name, shape]`` pairs; payloads follow in manifest order, row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import WeightFormatError

MAGIC = b"S4CW"
VERSION = 1
_HEADER = struct.Struct("<4sHI")


def encode(tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    meta = dict(metadata or {})
    meta["tensors"] = [[name, list(np.shape(arr))] for name, arr in tensors.items()]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, len(blob)), blob]
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _HEADER.size:
        raise WeightFormatError("file shorter than the S4CW header")
    magic, version, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    start = _HEADER.size
    try:
        meta = json.loads(data[start:start + meta_len].decode("utf-8"))
        manifest = meta["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise WeightFormatError(f"unreadable metadata: {exc}") from exc
    offset = start + meta_len
    expected = offset + sum(4 * int(np.prod(shape, dtype=np.int64)) for _, shape in manifest)
    if len(data) != expected:
        raise WeightFormatError(f"file is {len(data)} bytes, manifest implies {expected}")
    tensors = {}
    for name, shape in manifest:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.astype(np.float64).reshape(shape)
        offset += 4 * count
    return meta, tensors


def save(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    Path(path).write_bytes(encode(tensors, metadata))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def save_model(path, model) -> None:
    save(path, model.params, {"component": "target", "model_spec": model.spec.to_dict()})


def load_model(path):
    from .models import ModelSpec, TransformerModel

    meta, tensors = load(path)
    if meta.get("component", "target") != "target":
        raise WeightFormatError(f"{path} holds a {meta.get('component')!r} component, not a target model")
    return TransformerModel(ModelSpec.from_dict(meta["model_spec"]), tensors)

"""Portable weight file format.

Layout (all integers little-endian)::

    b"ADEE"            magic
    u32                format version
    u32                header length in bytes
    header             UTF-8 JSON: {"config": {...}, "tensors": [{"name", "shape"}, ...]}
    payload            tensors in header order, float32 little-endian, row-major

The header is authoritative; no sidecar files are read.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Union

import numpy as np

from .errors import (ConfigError, DimensionMismatchError, MalformedHeaderError,
                     NonFiniteError)
from .model import LayerStack, ModelConfig

MAGIC = b"ADEE"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")

PathLike = Union[str, os.PathLike]


def dumps_model(model: LayerStack) -> bytes:
    tensors = model.named_tensors()
    header = {
        "config": model.config.to_dict(),
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors.items()],
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header_bytes)), header_bytes]
    parts.extend(np.ascontiguousarray(t, dtype=_LE_F32).tobytes() for t in tensors.values())
    return b"".join(parts)


def save_model(model: LayerStack, path: PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model))


def loads_model(data: bytes) -> LayerStack:
    if len(data) < 12 or data[:4] != MAGIC:
        raise MalformedHeaderError("missing ADEE magic bytes")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported format version {version}")
    start = 12 + header_len
    if start > len(data):
        raise MalformedHeaderError("header length runs past end of file")
    try:
        header = json.loads(data[12:start].decode("utf-8"))
        config = ModelConfig(**header["config"])
        entries = [(e["name"], tuple(int(s) for s in e["shape"])) for e in header["tensors"]]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise MalformedHeaderError(f"bad header: {exc}") from exc

    expected = LayerStack.tensor_shapes(config)
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise MalformedHeaderError("duplicate tensor names in header")
    missing = [n for n in expected if n not in names]
    extra = [n for n in names if n not in expected]
    if missing or extra:
        n_blocks = len({n.split(".")[1] for n in names if n.startswith("layers.")})
        raise DimensionMismatchError(
            f"header declares n_layers={config.n_layers} but file holds {n_blocks} layer "
            f"blocks (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, shape in entries:
        if shape != expected[name]:
            raise DimensionMismatchError(f"{name}: header shape {shape} != expected {expected[name]}")

    total = sum(int(np.prod(shape)) for _, shape in entries) * 4
    if len(data) - start != total:
        raise DimensionMismatchError(
            f"payload is {len(data) - start} bytes, header implies {total}")

    tensors = {}
    offset = start
    for name, shape in entries:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=_LE_F32, count=count, offset=offset).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{name} contains NaN or Inf")
        tensors[name] = arr.astype(np.float32)
        offset += count * 4
    return LayerStack.from_named_tensors(config, tensors)


def load_model(path: PathLike) -> LayerStack:
    with open(path, "rb") as fh:
        return loads_model(fh.read())

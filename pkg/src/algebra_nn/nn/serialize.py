"""Binary parameter checkpoints.

Layout::

    magic     8 bytes  b"ALGNPARM"
    version   uint32 little-endian
    length    uint64 little-endian, byte length of the manifest
    manifest  UTF-8 JSON: {"algebra": tag, "meta": {...},
                           "arrays": [{"name": str, "shape": [int, ...]}, ...]}
    payload   float64 little-endian arrays, concatenated in manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ALGNPARM"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")

__all__ = ["CheckpointError", "save_arrays", "load_arrays", "dumps_arrays", "loads_arrays"]


class CheckpointError(ValueError):
    pass


def dumps_arrays(arrays: Mapping[str, np.ndarray], algebra: str, meta: dict | None = None) -> bytes:
    manifest = {
        "algebra": algebra,
        "meta": meta or {},
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    return _HEAD.pack(MAGIC, VERSION, len(head)) + head + body


def loads_arrays(blob: bytes) -> tuple[dict[str, np.ndarray], str, dict]:
    if len(blob) < _HEAD.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, n = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _HEAD.size
    try:
        manifest = json.loads(blob[start:start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint v{version}: corrupt manifest") from exc
    offset = start + n
    arrays = {}
    for item in manifest["arrays"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"checkpoint v{version}: payload truncated at {item['name']!r}")
        arrays[item["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"checkpoint v{version}: {len(blob) - offset} trailing bytes")
    return arrays, manifest["algebra"], manifest.get("meta", {})


def save_arrays(path, arrays: Mapping[str, np.ndarray], algebra: str, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_arrays(arrays, algebra, meta))


def load_arrays(path) -> tuple[dict[str, np.ndarray], str, dict]:
    return loads_arrays(Path(path).read_bytes())

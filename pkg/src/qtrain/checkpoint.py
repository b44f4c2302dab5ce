"""Flat binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"QTRCKPT1"
    8 bytes   u64 manifest length N
    N bytes   UTF-8 JSON manifest (sorted keys)
    ...       tensor payload, float32 little-endian, C order, back to back

The manifest lists every tensor as ``{"name", "shape", "dtype", "offset",
"nbytes"}`` with offsets relative to the start of the payload, plus a free
``meta`` object. Writing is deterministic: same tensors, same bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"QTRCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "dtype": "float32", "offset": offset,
                        "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = json.dumps({"byte_order": "little", "tensors": entries, "meta": meta or {}},
                          sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple:
    """Returns ``(tensors, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + n])
    payload = memoryview(data)[16 + n:]
    tensors = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        tensors[e["name"]] = np.frombuffer(payload[e["offset"]:end], dtype="<f4").reshape(e["shape"]).copy()
    return tensors, manifest.get("meta", {})

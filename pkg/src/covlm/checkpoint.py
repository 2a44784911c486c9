"""Flat binary checkpoint format.

Layout: a 4-byte little-endian u32 giving the manifest length in bytes,
the UTF-8 JSON manifest itself, then one raw little-endian float32 blob.
The manifest maps each array name to its shape and byte offset into the
blob. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np


class CheckpointError(Exception):
    pass


MANIFEST_META_KEY = "__meta__"


def save(path: str, arrays: dict, meta: dict | None = None) -> None:
    """Write name -> float32 ndarray mapping. Keys are sorted so identical
    contents always produce identical bytes. `meta` (e.g. the run config
    snapshot) is embedded in the manifest under a reserved key."""
    manifest = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        if name == MANIFEST_META_KEY:
            raise CheckpointError(f"array name {name!r} is reserved")
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
    if meta is not None:
        manifest[MANIFEST_META_KEY] = meta
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        for raw in blobs:
            fh.write(raw)


def load(path: str) -> dict:
    """Read back a name -> float32 ndarray mapping."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4:
            raise CheckpointError(f"{path}: truncated header")
        (mlen,) = struct.unpack("<I", head)
        mbytes = fh.read(mlen)
        if len(mbytes) != mlen:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(mbytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: bad manifest: {e}") from e
        blob = fh.read()
    out = {}
    for name, entry in manifest.items():
        if name == MANIFEST_META_KEY:
            continue
        shape = tuple(entry["shape"])
        offset = int(entry["offset"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: array '{name}' extends past end of file")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape)
        out[name] = arr.copy()
    return out


def load_meta(path: str):
    """The meta block stored at save time, or None."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4:
            raise CheckpointError(f"{path}: truncated header")
        (mlen,) = struct.unpack("<I", head)
        mbytes = fh.read(mlen)
        if len(mbytes) != mlen:
            raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(mbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad manifest: {e}") from e
    return manifest.get(MANIFEST_META_KEY)


def describe(path: str) -> list:
    """(name, shape, n_elements) for each stored array, name-sorted."""
    arrays = load(path)
    return [(k, tuple(v.shape), int(v.size)) for k, v in sorted(arrays.items())]

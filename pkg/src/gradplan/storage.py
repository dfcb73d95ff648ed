"""Manifest + binary container used for checkpoints and episode files.

Layout of a file::

    8 bytes   magic b"GRADPLAN"
    8 bytes   little-endian uint64 length of the manifest
    N bytes   UTF-8 JSON manifest
    rest      little-endian float64 data, entries concatenated in manifest order

The manifest carries ``format_version``, ``kind``, an ``entries`` list of
``{"name", "shape"}`` objects and a free-form ``meta`` object.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GRADPLAN"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def write_container(path, arrays: dict[str, np.ndarray], kind: str, meta: dict | None = None) -> None:
    entries, blobs = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "dtype": "float64-le",
        "entries": entries,
        "meta": meta or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, manifest)``; arrays keep manifest order."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"{path}: unreadable manifest") from err
    if "format_version" not in manifest:
        raise FormatError(f"{path}: manifest lacks format_version")
    if manifest["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {manifest['format_version']}")
    if kind is not None and manifest.get("kind") != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {manifest.get('kind')!r}")
    data = np.frombuffer(raw[16 + n:], dtype="<f8")
    total = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["entries"])
    if total != data.size:
        raise FormatError(f"{path}: blob holds {data.size} floats, manifest expects {total}")
    arrays, offset = {}, 0
    for entry in manifest["entries"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = data[offset:offset + size].reshape(entry["shape"]).astype(np.float64)
        offset += size
    return arrays, manifest

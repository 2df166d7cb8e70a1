"""Byte-stable checkpoint container.

Layout: one UTF-8 JSON manifest line (format version, metadata, array
directory with names/shapes/dtypes in serialized order) + newline +
concatenated little-endian raw array payloads. Array names are sorted so
identical contents always serialize to identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "|u1", "int64": "<i8"}


class CheckpointError(Exception):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write named arrays plus JSON-serializable metadata."""
    path = Path(path)
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dname = arr.dtype.name
        if dname not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dname} for array {name!r}")
        blob = np.ascontiguousarray(arr).astype(_DTYPES[dname], copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dname, "nbytes": len(blob)})
        blobs.append(blob)
    manifest = {"format_version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries}
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Return (arrays dict, meta dict)."""
    path = Path(path)
    with open(path, "rb") as f:
        header = f.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"malformed checkpoint manifest in {path}: {e}") from None
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version in {path}")
        arrays = {}
        for entry in manifest["arrays"]:
            raw = f.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise CheckpointError(f"truncated checkpoint payload for array {entry['name']!r}")
            arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
            arrays[entry["name"]] = arr.astype(entry["dtype"])
    return arrays, manifest.get("meta", {})

"""Self-describing checkpoint archives.

A checkpoint is a zip file holding ``manifest.json`` (format tag, config echo,
free-form metadata and one entry per array) and one raw little-endian blob per
array. Floating arrays are stored as f32; integer arrays as i64.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "gserec-archive/1"
_DTYPES = {"f32": "<f4", "i64": "<i8"}


def save_archive(path: str | Path, kind: str, config: Mapping, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, (name, arr) in enumerate(arrays.items()):
            arr = np.asarray(arr)
            tag = "i64" if np.issubdtype(arr.dtype, np.integer) else "f32"
            blob = f"blobs/{i:04d}.bin"
            zf.writestr(blob, np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": tag, "blob": blob})
        manifest = {"format": FORMAT, "kind": kind, "config": dict(config), "meta": dict(meta or {}), "arrays": entries}
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_archive(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (manifest, arrays)."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} archive")
        if kind is not None and manifest["kind"] != kind:
            raise ValueError(f"{path}: expected a {kind} archive, found {manifest['kind']}")
        arrays = {}
        for e in manifest["arrays"]:
            raw = np.frombuffer(zf.read(e["blob"]), dtype=_DTYPES[e["dtype"]])
            arrays[e["name"]] = raw.reshape(e["shape"]).copy()
    return manifest, arrays

"""Parameter persistence: one flat little-endian float32 file per array,
indexed by a JSON manifest mapping parameter name -> shape and file."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


def _filename(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".bin"


def save_arrays(directory, arrays: dict, metadata: dict | None = None) -> Path:
    """Write ``name -> ndarray`` to ``directory`` and return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        fname = _filename(name)
        if any(e["file"] == fname for e in entries.values()):
            raise ValueError(f"parameter names collide after sanitization: {name!r}")
        (directory / fname).write_bytes(arr.astype("<f4").tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "parameters": entries,
        "metadata": metadata or {},
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_arrays(directory) -> tuple[dict, dict]:
    """Read a manifest directory back into (``name -> float32 ndarray``, metadata)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version {manifest.get('format_version')}")
    arrays = {}
    for name, entry in manifest["parameters"].items():
        raw = (directory / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise ValueError(
                f"parameter {name!r}: file holds {arr.size} values, manifest says {expected}"
            )
        arrays[name] = arr.reshape(entry["shape"])
    return arrays, manifest.get("metadata", {})

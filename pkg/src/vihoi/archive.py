"""Single-file tensor archives: manifest.json + tensors/<name>.npy in an uncompressed zip."""
from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy(arr) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_archive(path, manifest: dict, tensors: dict, schema: str) -> Path:
    """Atomic write; tensors are stored as float32. Fixed timestamps keep bytes reproducible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()}
    manifest = dict(manifest, schema=schema, tensors={k: list(v.shape) for k, v in sorted(tensors.items())})
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _EPOCH), json.dumps(manifest, indent=2, sort_keys=True))
        for k in sorted(tensors):
            zf.writestr(zipfile.ZipInfo(f"tensors/{k}.npy", _EPOCH), _npy(tensors[k]))
    os.replace(tmp, path)
    return path


def read_archive(path, schema: str):
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("schema") != schema:
            raise ValueError(f"{path}: expected schema {schema!r}, got {manifest.get('schema')!r}")
        tensors = {k: np.load(io.BytesIO(zf.read(f"tensors/{k}.npy"))) for k in manifest["tensors"]}
    return manifest, tensors

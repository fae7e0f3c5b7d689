"""On-disk corpus layout.

    <data>/index.json                       sequence listing (toy_dataset.build_corpus)
    <data>/sequences/<id>/meta.json, *.f32  sequence container
    <data>/sequences/<id>/keyframes/{0,1,2}.png
    <data>/sequences/<id>/keyframes/keyframes.json
    <data>/manifest.json                    written last; marks a complete corpus
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import MissingReferenceImages
from .motion import MotionSequence, load_sequence
from .priors import array_to_png, load_image

MANIFEST_SCHEMA = "vihoi.corpus-manifest/1"


def sequence_dir(data_dir, sid: str) -> Path:
    return Path(data_dir) / "sequences" / sid


def keyframe_paths(data_dir, sid: str):
    d = sequence_dir(data_dir, sid) / "keyframes"
    return [d / f"{i}.png" for i in range(3)]


def write_keyframes(data_dir, sid: str, images, indices) -> list:
    paths = keyframe_paths(data_dir, sid)
    paths[0].parent.mkdir(parents=True, exist_ok=True)
    for p, im in zip(paths, images):
        p.write_bytes(array_to_png(im))
    (paths[0].parent / "keyframes.json").write_text(json.dumps({"indices": list(map(int, indices))}) + "\n")
    return paths


def load_keyframes(data_dir, sid: str, size: int = 224) -> np.ndarray:
    paths = keyframe_paths(data_dir, sid)
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise MissingReferenceImages(f"{sid}: missing reference images {missing}")
    return np.stack([load_image(p, size) for p in paths])


def load_item(data_dir, sid: str) -> MotionSequence:
    return load_sequence(sequence_dir(data_dir, sid))


def tree_digest(root) -> str:
    """sha256 over relative paths and bytes of every file under root (manifest and run record excluded)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in ("manifest.json", "run.json"):
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(data_dir, doc: dict) -> Path:
    path = Path(data_dir) / "manifest.json"
    doc = dict(doc, schema=MANIFEST_SCHEMA, digest=tree_digest(data_dir))
    tmp = path.with_name("manifest.json.tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def is_complete(data_dir) -> bool:
    return (Path(data_dir) / "manifest.json").is_file()

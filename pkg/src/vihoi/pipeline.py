"""Glue between corpus items, reference images, priors and the sampler."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import corpus, render, toy_dataset
from .motion import MotionSequence
from .priors import array_to_png, build_t2i_prompt, png_to_array

REFERENCE_SOURCES = ("stub", "external", "gt")


def task_from_meta(meta: dict) -> toy_dataset.ToyTask:
    t = dict(meta["task"])
    for k in ("object_dims", "start", "end"):
        t[k] = tuple(t[k])
    return toy_dataset.ToyTask(**t)


def reference_images(data_dir, sid: str, seq: MotionSequence, source: str, cfg: dict):
    """Three 224x224 reference images for one item.

    gt: keyframes rendered from the item itself (training-time inputs).
    stub / external: text-to-image from the annotation plus a seed image of the scene.
    """
    size = cfg["encoder"]["image_size"]
    if source == "gt":
        return corpus.load_keyframes(data_dir, sid, size)
    if source not in REFERENCE_SOURCES:
        raise ValueError(f"unknown reference source {source!r}")
    task = task_from_meta(seq.meta)
    seed = render.seed_image(task, render.Camera(), seq.meta.get("subject", 0))
    t2i = cfg["t2i"]
    endpoint = t2i["endpoint"] or os.environ.get("VIHOI_T2I_ENDPOINT")
    imgs = render.t2i_generate(build_t2i_prompt(seq.text), seed, source, endpoint, t2i["timeout"])
    if imgs[0].shape[:2] != (size, size):
        imgs = [png_to_array(array_to_png(im), size) for im in imgs]
    return np.stack(imgs)


def sample_seed(seed: int, sid: str) -> int:
    h = hashlib.sha256(f"sample:{seed}:{sid}".encode()).digest()
    return int.from_bytes(h[:4], "little")


@dataclass
class SampleRequest:
    sid: str
    text: str
    images: np.ndarray
    mesh: object
    length: int
    meta: dict
    seed: int


def requests_for(data_dir, ids, source: str, cfg: dict, seed: int, texts: dict | None = None):
    """One request per item; `texts` optionally overrides annotations (sid -> text)."""
    out = []
    for sid in ids:
        seq = corpus.load_item(data_dir, sid)
        if texts and sid in texts:
            seq = seq.copy(text=texts[sid])
        out.append(SampleRequest(sid, seq.text, reference_images(data_dir, sid, seq, source, cfg),
                                 toy_dataset.sequence_mesh(seq), seq.length,
                                 dict(seq.meta, source_id=sid), sample_seed(seed, sid)))
    return out


def run_requests(gen, extractor, requests, steps: int | None = None, batch: int = 16):
    """Sample one sequence per request; rows use independent seeds so batching does not matter."""
    out = []
    by_len = {}
    for i, r in enumerate(requests):
        by_len.setdefault(r.length, []).append(i)
    result = [None] * len(requests)
    for L, idx in by_len.items():
        for s in range(0, len(idx), batch):
            chunk = [requests[i] for i in idx[s:s + batch]]
            pri = [extractor.priors(r.text, r.images) for r in chunk]
            seqs = gen.sample([p[0] for p in pri], [p[1] for p in pri],
                              [gen.featurizer.features(r.mesh) for r in chunk], L,
                              [r.seed for r in chunk], steps,
                              meta_list=[r.meta for r in chunk], texts=[r.text for r in chunk])
            for i, sq in zip(idx[s:s + batch], seqs):
                result[i] = sq
    out.extend(result)
    return out

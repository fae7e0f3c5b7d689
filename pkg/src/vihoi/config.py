"""Layered run configuration: built-in defaults < TOML file < --set overrides.

Grammar: TOML tables matching the sections below; every key must already
exist in the defaults and keep its type (ints are accepted where floats are
expected). Overrides use dotted paths, e.g. ``--set train.steps=200``; the
value is parsed as a TOML literal and falls back to a bare string.
"""
from __future__ import annotations

import copy
import json

import tomli

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "paths": {
        "data": "vihoi_run/data",
        "evaluator": "vihoi_run/evaluator",
        "model": "vihoi_run/model",
        "samples": "vihoi_run/samples",
        "report": "vihoi_run/report",
        "renders": "vihoi_run/renders",
        "ablation": "vihoi_run/ablation",
    },
    "dataset": {
        "n_sequences": 64,
        "n_subjects": 10,
        "frames": 64,
        "fps": 30.0,
        "held_out_subjects": [8, 9],
        "held_out_objects": ["cylinder"],
        "split": "by_subject",
        "contact_labels": True,
    },
    "render": {
        "resolution": 224,
        "ortho_scale": 2.3 / 224,
        "eye": [4.0, 1.9, 2.2],
        "look_at": [0.0, 0.75, 0.6],
    },
    "encoder": {
        "backend": "toy",
        "endpoint": "",
        "depth": 16,
        "d_enc": 256,
        "heads": 4,
        "patch": 16,
        "image_size": 224,
        "seed": 0,
        "warmup_epochs": 0,
    },
    "extraction": {
        "visual_layer": 3,
        "text_layer": 12,
        "text_only": False,
        "text_source": "vlm",
    },
    "adapter": {
        "variant": "qformer",
        "k_visual": 1,
        "k_text": 1,
        "heads": 4,
        "ffn": False,
    },
    "diffusion": {
        "schedule": "cosine",
        "T": 1000,
        "sample_steps": 100,
        "d_model": 256,
        "layers": 6,
        "heads": 4,
        "max_len": 256,
        "geometry": "bps",
        "geometry_fusion": "add",
        "bps_points": 1024,
        "bps_seed": 7,
        "bps_radius_scale": 1.2,
        "cond_dropout": 0.0,
    },
    "train": {
        "steps": 2000,
        "batch": 16,
        "lr": 1e-4,
        "clip": 1.0,
        "log_every": 50,
        "checkpoint_every": 500,
    },
    "evaluator": {
        "text_encoder": "toy",
        "dim": 512,
        "hidden": 256,
        "epochs": 60,
        "batch": 32,
        "lr": 1e-3,
        "margin": 0.2,
    },
    "metrics": {
        "contact_threshold": 0.05,
        "penetration_delta": 0.005,
        "fs_height": 0.05,
        "diversity_pairs": 300,
        "rprec_batch": 32,
    },
    "t2i": {
        "mode": "stub",
        "endpoint": "",
        "timeout": 60.0,
    },
    "ablate": {
        "steps": 60,
        "n_train": 16,
        "n_eval": 8,
        "encoder_depth": 36,
    },
}


def _check(node, ref, path=""):
    if isinstance(ref, dict):
        if not isinstance(node, dict):
            raise ConfigError(f"{path or 'config'} must be a table")
        for k, v in node.items():
            key = f"{path}.{k}" if path else k
            if k not in ref:
                raise ConfigError(f"unknown config key {key!r}")
            _check(v, ref[k], key)
        return
    if isinstance(ref, bool):
        ok = isinstance(node, bool)
    elif isinstance(ref, float):
        ok = isinstance(node, (int, float)) and not isinstance(node, bool)
    elif isinstance(ref, int):
        ok = isinstance(node, int) and not isinstance(node, bool)
    else:
        ok = isinstance(node, type(ref))
    if not ok:
        raise ConfigError(f"{path} expects {type(ref).__name__}, got {node!r}")


def _merge(base, over):
    for k, v in over.items():
        if isinstance(v, dict):
            _merge(base[k], v)
        else:
            base[k] = float(v) if isinstance(base[k], float) else v
    return base


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    path, raw = item.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    node = out = {}
    keys = path.strip().split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return out


def resolve(config_path=None, overrides=(), base: dict | None = None) -> dict:
    cfg = copy.deepcopy(base or DEFAULTS)
    layers = []
    if config_path:
        with open(config_path, "rb") as fh:
            try:
                layers.append(tomli.load(fh))
            except tomli.TOMLDecodeError as e:
                raise ConfigError(f"{config_path}: {e}") from e
    layers += [parse_override(o) for o in overrides]
    for layer in layers:
        _check(layer, DEFAULTS)
        _merge(cfg, layer)
    return cfg


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)

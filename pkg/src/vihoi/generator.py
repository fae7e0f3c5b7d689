"""Joint training of the two adapters and the denoiser against a frozen prior extractor."""
from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import corpus, geometry, toy_dataset
from .adapter import make_adapters
from .archive import read_archive, write_archive
from .diffusion import Denoiser, DenoiserConfig, ddpm_sample_loop, make_schedule, masked_mse, q_sample
from .encoder import EncoderConfig, ToyTextEncoder, toy_encoder, warmup_pretrain
from .errors import FrozenViolation
from .motion import MODEL_DIM, MotionSequence
from .priors import (ExtractionConfig, build_extraction_prompt, clip_text_prior, default_tokenizer, encode,
                     extract_priors)

CHECKPOINT_SCHEMA = "vihoi.checkpoint/1"


# ---------------------------------------------------------------- priors

class PriorExtractor:
    """Frozen encoder + layer choice; caches priors per (images, text)."""

    def __init__(self, encoder, ext: ExtractionConfig = ExtractionConfig(), text_source: str = "vlm",
                 clip_encoder=None):
        if text_source not in ("vlm", "clip"):
            raise ValueError(f"unknown text source {text_source!r}")
        self.encoder = encoder
        self.ext = ext
        self.text_source = text_source
        self.tokenizer = default_tokenizer()
        self.clip = clip_encoder
        if self.clip is None and text_source == "clip":
            self.clip = ToyTextEncoder(d=self.d_enc)
        self._cache = {}

    @property
    def d_enc(self) -> int:
        return self.encoder.d_enc if hasattr(self.encoder, "d_enc") else self.encoder.info()["d_enc"]

    def checksum(self) -> str:
        parts = [self.encoder.checksum()]
        if self.clip is not None:
            from .encoder import parameter_checksum
            parts.append(parameter_checksum(self.clip))
        return hashlib.sha256("|".join(parts).encode()).hexdigest()

    def label(self) -> str:
        return self.ext.label() + ("-clip" if self.text_source == "clip" else "")

    def priors(self, text: str, images) -> tuple:
        images = np.asarray(images, dtype=np.float32)
        key = hashlib.sha256(images.tobytes() + text.encode() + self.label().encode()).hexdigest()
        if key not in self._cache:
            ext = self.ext
            layers = [] if ext.text_only else [ext.visual_layer]
            if self.text_source == "vlm":
                layers.append(ext.text_layer)
            emb = None
            if layers:
                emb = encode(images, build_extraction_prompt(text, self.tokenizer), self.encoder, layers)
            if ext.text_only:
                e_v = np.zeros((1, self.d_enc), np.float32)
            else:
                v0, v1 = emb.visual_span
                e_v = np.asarray(emb.states[ext.visual_layer][v0:v1], np.float32)
            if self.text_source == "clip":
                e_t = clip_text_prior(text, self.clip, self.tokenizer)
            else:
                e_t = extract_priors(emb, ext)[1]
            self._cache[key] = (e_v, e_t)
        return self._cache[key]


def build_extractor(cfg: dict, warmup_data=None) -> PriorExtractor:
    enc_cfg = cfg["encoder"]
    ext_cfg = cfg["extraction"]
    ext = ExtractionConfig(ext_cfg["visual_layer"], ext_cfg["text_layer"], ext_cfg["text_only"])
    if enc_cfg["backend"] == "external":
        from .remote import RemoteEncoder
        endpoint = enc_cfg["endpoint"] or os.environ.get("VIHOI_ENCODER_ENDPOINT", "")
        encoder = RemoteEncoder(endpoint, image_size=enc_cfg["image_size"])
    elif enc_cfg["backend"] == "toy":
        ecfg = EncoderConfig(depth=enc_cfg["depth"], d_enc=enc_cfg["d_enc"], heads=enc_cfg["heads"],
                             patch=enc_cfg["patch"], image_size=enc_cfg["image_size"])
        encoder = toy_encoder(ecfg, enc_cfg["seed"])
        if enc_cfg["warmup_epochs"] > 0 and warmup_data is not None:
            images, captions = warmup_data
            warmup_pretrain(encoder, images, captions, default_tokenizer(), epochs=enc_cfg["warmup_epochs"],
                            seed=enc_cfg["seed"], visual_layer=ext.visual_layer, text_layer=ext.text_layer)
        encoder.freeze()
    else:
        raise ValueError(f"unknown encoder backend {enc_cfg['backend']!r}")
    return PriorExtractor(encoder, ext, ext_cfg["text_source"])


# ---------------------------------------------------------------- geometry + normalisation

class GeometryFeaturizer:
    def __init__(self, kind: str = "bps", n_points: int = 1024, seed: int = 7, radius: float = 1.0,
                 basis=None):
        self.kind, self.radius = kind, float(radius)
        if kind == "bps":
            self.basis = (np.asarray(basis, dtype=np.float64) if basis is not None
                          else geometry.sample_basis_points(n_points, radius, seed))
        elif kind == "keypoint24":
            self.basis = None
        else:
            raise ValueError(f"unknown geometry path {kind!r}")

    @property
    def input_dim(self) -> int:
        return len(self.basis) if self.kind == "bps" else 72

    def features(self, mesh: geometry.ObjectMesh) -> np.ndarray:
        m = geometry.centered(mesh)
        if self.kind == "bps":
            return (geometry.bps_encode(m, self.basis).distances / self.radius).astype(np.float32)
        return geometry.sample_keypoints(m).as_array().reshape(-1).astype(np.float32)


def corpus_radius(meshes, scale: float = 1.2) -> float:
    return scale * max(geometry.half_diagonal(m) for m in meshes)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, xs, floor: float = 0.05):
        x = np.concatenate([np.asarray(a, dtype=np.float64) for a in xs], axis=0)
        return cls(x.mean(0), np.maximum(x.std(0), floor))

    def encode(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def decode(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------- model

class GeneratorModel(nn.Module):
    def __init__(self, dcfg: DenoiserConfig, d_enc: int, adapter_cfg: dict, seed: int = 0):
        super().__init__()
        self.denoiser = Denoiser(dcfg, seed)
        self.adapter_visual, self.adapter_text = make_adapters(
            d_enc, dcfg.d_model, adapter_cfg["k_visual"], adapter_cfg["k_text"], seed,
            adapter_cfg["heads"], adapter_cfg["ffn"], adapter_cfg["variant"])

    def conditions(self, e_v, e_t, geom_in):
        """Lists of per-item priors -> (c_v, c_t, geometry embedding) tensors."""
        dtype = next(self.parameters()).dtype
        Ev, mv = _pad(e_v, dtype)
        Et, mt = _pad(e_t, dtype)
        c_v = self.adapter_visual(Ev, mv)
        c_t = self.adapter_text(Et, mt)
        g = self.denoiser.embed_geometry(torch.as_tensor(np.asarray(geom_in), dtype=dtype))
        return c_v, c_t, g

    def forward(self, x_t, t, cond):
        c_v, c_t, g = cond
        return self.denoiser(x_t, t, c_v, c_t, g)

    def named_tensors(self) -> dict:
        out = {}
        for name, p in self.state_dict().items():
            if name.startswith("adapter_visual."):
                name = "adapter.visual." + name[len("adapter_visual."):]
            elif name.startswith("adapter_text."):
                name = "adapter.text." + name[len("adapter_text."):]
            out[name] = p
        return out

    def load_named_tensors(self, tensors: dict):
        sd = {}
        for name, v in tensors.items():
            if name.startswith("adapter.visual."):
                name = "adapter_visual." + name[len("adapter.visual."):]
            elif name.startswith("adapter.text."):
                name = "adapter_text." + name[len("adapter.text."):]
            sd[name] = torch.as_tensor(v)
        self.load_state_dict(sd)


def _pad(arrays, dtype):
    n = max(a.shape[0] for a in arrays)
    d = arrays[0].shape[1]
    out = torch.zeros(len(arrays), n, d, dtype=dtype)
    mask = torch.zeros(len(arrays), n, dtype=torch.bool)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = torch.as_tensor(np.asarray(a), dtype=dtype)
        mask[i, : len(a)] = True
    return out, mask


def denoiser_config(cfg: dict, geom_input_dim: int) -> DenoiserConfig:
    d = cfg["diffusion"]
    return DenoiserConfig(d_model=d["d_model"], layers=d["layers"], heads=d["heads"], max_len=d["max_len"],
                          geometry=d["geometry"], geometry_input_dim=geom_input_dim,
                          geometry_fusion=d["geometry_fusion"])


# ---------------------------------------------------------------- data

@dataclass
class TrainItem:
    sid: str
    seq: MotionSequence
    x0: np.ndarray          # normalised (L, D)
    e_v: np.ndarray
    e_t: np.ndarray
    geom_in: np.ndarray


def prepare_items(data_dir, ids, extractor: PriorExtractor, featurizer: GeometryFeaturizer,
                  normalizer: Normalizer | None = None, image_size: int = 224):
    """Load sequences, reference images and priors; fits the normaliser when none is given."""
    seqs = [corpus.load_item(data_dir, sid) for sid in ids]
    images = [corpus.load_keyframes(data_dir, sid, image_size) for sid in ids]
    if normalizer is None:
        normalizer = Normalizer.fit([s.to_model_vector() for s in seqs])
    items = []
    for sid, seq, img in zip(ids, seqs, images):
        e_v, e_t = extractor.priors(seq.text, img)
        items.append(TrainItem(sid, seq, normalizer.encode(seq.to_model_vector()).astype(np.float32),
                               e_v, e_t, featurizer.features(toy_dataset.sequence_mesh(seq))))
    return items, normalizer


def training_loss(batch, model: GeneratorModel, sched, rng: np.random.Generator, cond_dropout: float = 0.0):
    """Mean squared x0 reconstruction error at uniformly drawn t (mean over batch, frames, dims)."""
    dtype = next(model.parameters()).dtype
    x0 = torch.as_tensor(np.stack([b.x0 for b in batch]), dtype=dtype)
    B = x0.shape[0]
    t = rng.integers(0, sched.T, size=B)
    eps = torch.as_tensor(rng.standard_normal(x0.shape), dtype=dtype)
    x_t = q_sample(x0, t, eps, sched)
    c_v, c_t, g = model.conditions([b.e_v for b in batch], [b.e_t for b in batch],
                                   np.stack([b.geom_in for b in batch]))
    if cond_dropout > 0:
        keep = torch.as_tensor(rng.random(B) >= cond_dropout, dtype=dtype)[:, None, None]
        c_v, c_t = c_v * keep, c_t * keep
    pred = model.denoiser(x_t, torch.as_tensor(t), c_v, c_t, g)
    return masked_mse(pred, x0)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: GeneratorModel, optimizer, manifest: dict, extra: dict) -> Path:
    """Archive with model tensors (adapter.visual.*, adapter.text.*, denoiser.*), optimizer moments and extras."""
    tensors = {k: v.detach().cpu().numpy() for k, v in model.named_tensors().items()}
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        for idx, s in optimizer.state_dict()["state"].items():
            for key, val in s.items():
                tensors[f"optim.{names[idx]}.{key}"] = val.detach().cpu().numpy()
    tensors.update(extra)
    return write_archive(path, manifest, tensors, CHECKPOINT_SCHEMA)


def read_checkpoint(path):
    return read_archive(path, CHECKPOINT_SCHEMA)


@dataclass
class Generator:
    """Everything needed to sample: model, schedule, normaliser, geometry features, config."""
    model: GeneratorModel
    cfg: dict
    normalizer: Normalizer
    featurizer: GeometryFeaturizer
    manifest: dict = field(default_factory=dict)

    @property
    def sched(self):
        d = self.cfg["diffusion"]
        return make_schedule(d["schedule"], d["T"])

    def sample(self, e_v_list, e_t_list, geom_list, L: int, seeds, steps: int | None = None,
               meta_list=None, texts=None):
        """One sequence per conditioning item, each with its own seed."""
        steps = steps or self.cfg["diffusion"]["sample_steps"]
        model = self.model.eval()
        with torch.no_grad():
            cond = model.conditions(list(e_v_list), list(e_t_list), np.stack(geom_list))
            dtype = next(model.parameters()).dtype

            def predict(x, t):
                xt = torch.as_tensor(x, dtype=dtype)
                tt = torch.full((x.shape[0],), t, dtype=torch.long)
                return model(xt, tt, cond).double().numpy()

            z = ddpm_sample_loop(predict, (len(seeds), L, MODEL_DIM), self.sched, steps, list(seeds))
        out = []
        for i, zi in enumerate(z):
            seq = MotionSequence.from_model_vector(self.normalizer.decode(zi),
                                                   fps=self.cfg["dataset"]["fps"],
                                                   text=texts[i] if texts else "")
            if meta_list:
                seq.meta = dict(meta_list[i])
            out.append(seq)
        return out


def load_generator(path) -> Generator:
    manifest, tensors = read_checkpoint(path)
    cfg = manifest["config"]
    feat = GeometryFeaturizer(cfg["diffusion"]["geometry"], radius=manifest["bps_radius"],
                              basis=tensors.get("geometry.basis"))
    model = GeneratorModel(denoiser_config(cfg, feat.input_dim), manifest["d_enc"], cfg["adapter"],
                           manifest["seed"])
    model.load_named_tensors({k: v for k, v in tensors.items()
                              if not k.startswith(("optim.", "norm.", "geometry."))})
    norm = Normalizer(tensors["norm.mean"].astype(np.float64), tensors["norm.std"].astype(np.float64))
    return Generator(model, cfg, norm, feat, manifest)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Path
    losses: list
    extractor_checksum: str
    wall_time: float


def _restore_optimizer(opt, model, tensors):
    names = [n for n, _ in model.named_parameters()]
    state = {}
    for idx, n in enumerate(names):
        keys = [k for k in tensors if k.startswith(f"optim.{n}.")]
        if keys:
            state[idx] = {k[len(f"optim.{n}."):]: torch.as_tensor(tensors[k]) for k in keys}
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def train(data_dir, cfg: dict, seed: int, out_path, ids=None, extractor: PriorExtractor | None = None,
          resume=None, steps: int | None = None, progress=None) -> TrainResult:
    """Train on `ids` (default: the configured train split); checkpoint to out_path."""
    t0 = time.time()
    data_dir = Path(data_dir)
    tcfg = cfg["train"]
    steps = tcfg["steps"] if steps is None else steps
    if ids is None and resume is None:
        ids = split_ids(data_dir, cfg)[0]
    extractor = extractor or build_extractor(cfg)
    checksum0 = extractor.checksum()
    dcfg = cfg["diffusion"]

    if resume is not None:
        manifest, tensors = read_checkpoint(resume)
        gen = load_generator(resume)
        model, normalizer, feat = gen.model, gen.normalizer, gen.featurizer
        ids = manifest["train_ids"]
        start, losses = manifest["step"], list(manifest["losses"])
    else:
        meshes = [toy_dataset.sequence_mesh(corpus.load_item(data_dir, sid)) for sid in ids]
        radius = corpus_radius(meshes, dcfg["bps_radius_scale"])
        feat = GeometryFeaturizer(dcfg["geometry"], dcfg["bps_points"], dcfg["bps_seed"], radius)
        model = None
        normalizer = None
        start, losses, tensors = 0, [], None

    items, normalizer = prepare_items(data_dir, ids, extractor, feat, normalizer, cfg["encoder"]["image_size"])
    if model is None:
        model = GeneratorModel(denoiser_config(cfg, feat.input_dim), extractor.d_enc, cfg["adapter"], seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tcfg["lr"])
    if tensors is not None:
        _restore_optimizer(opt, model, tensors)
    sched = make_schedule(dcfg["schedule"], dcfg["T"])

    def checkpoint(step):
        manifest = {"config": cfg, "step": step, "seed": seed, "extractor_checksum": checksum0,
                    "extraction": extractor.label(), "d_enc": extractor.d_enc, "bps_radius": feat.radius,
                    "train_ids": list(ids), "losses": losses}
        extra = {"norm.mean": normalizer.mean, "norm.std": normalizer.std}
        if feat.basis is not None:
            extra["geometry.basis"] = feat.basis
        return save_checkpoint(out_path, model, opt, manifest, extra)

    for step in range(start, steps):
        rng = np.random.default_rng([seed, step])
        idx = rng.choice(len(items), size=min(tcfg["batch"], len(items)), replace=False)
        loss = training_loss([items[i] for i in idx], model, sched, rng, dcfg["cond_dropout"])
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg["clip"])
        opt.step()
        losses.append(float(loss.item()))
        if progress and (step % tcfg["log_every"] == 0 or step == steps - 1):
            progress(step, losses[-1])
        if tcfg["checkpoint_every"] and (step + 1) % tcfg["checkpoint_every"] == 0 and step + 1 < steps:
            checkpoint(step + 1)
    if extractor.checksum() != checksum0:
        raise FrozenViolation("prior extractor parameters changed during training")
    path = checkpoint(steps)
    return TrainResult(path, losses, checksum0, time.time() - t0)


def split_ids(data_dir, cfg: dict):
    index = toy_dataset.load_index(data_dir)
    ds = cfg["dataset"]
    held = ds["held_out_subjects"] if ds["split"] == "by_subject" else ds["held_out_objects"]
    return toy_dataset.make_split(index, toy_dataset.SplitSpec(ds["split"], tuple(held)))

"""Toy multimodal encoder: a causal transformer over [image patches | prompt tokens].

Small stand-in for a vision-language model. Every block's post-residual
output is addressable by its 1-based layer index, and the forward pass stops
at the deepest requested layer so unrequested states are never computed.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DepthTooSmall, LayerMissing

MIN_DEPTH = 12


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 16
    d_enc: int = 256
    heads: int = 4
    patch: int = 16
    image_size: int = 224
    vocab_size: int = 2048
    max_text: int = 512
    mlp_ratio: int = 4
    n_images: int = 3

    @property
    def patches_per_image(self) -> int:
        return (self.image_size // self.patch) ** 2


def _seed_for(seed: int, tag: str) -> int:
    h = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def _init_(module: nn.Module, seed: int, tag: str):
    g = torch.Generator().manual_seed(_seed_for(seed, tag))
    for name, p in module.named_parameters():
        with torch.no_grad():
            if name.endswith("bias"):
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=g) * 0.02)


class Block(nn.Module):
    def __init__(self, d, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mlp_ratio * d)
        self.fc2 = nn.Linear(mlp_ratio * d, d)

    def forward(self, x):
        B, N, D = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.out(a.transpose(1, 2).reshape(B, N, D))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ToyEncoder(nn.Module):
    """Causal transformer; layer l of a deeper encoder equals layer l of a shallower one (same seed)."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        if cfg.depth < 1:
            raise DepthTooSmall("encoder needs at least one layer")
        self.cfg, self.seed = cfg, seed
        d = cfg.d_enc
        self.patch_embed = nn.Linear(3 * cfg.patch * cfg.patch, d)
        self.patch_pos = nn.Parameter(torch.zeros(cfg.patches_per_image, d))
        self.image_embed = nn.Parameter(torch.zeros(cfg.n_images, d))
        self.tok_embed = nn.Embedding(cfg.vocab_size, d)
        self.text_pos = nn.Parameter(torch.zeros(cfg.max_text, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        # readout heads used only by warm-up alignment
        self.align_v = nn.Linear(d, d)
        self.align_t = nn.Linear(d, d)
        for name in ("patch_embed", "tok_embed", "align_v", "align_t"):
            _init_(getattr(self, name), seed, name)
        g = torch.Generator().manual_seed(_seed_for(seed, "pos"))
        with torch.no_grad():
            for p in (self.patch_pos, self.image_embed, self.text_pos):
                p.copy_(torch.randn(p.shape, generator=g) * 0.02)
        for i, blk in enumerate(self.blocks):
            _init_(blk, seed, f"block{i}")
        self.frozen = False

    # -- bookkeeping
    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def checksum(self) -> str:
        return parameter_checksum(self)

    @property
    def depth(self) -> int:
        return self.cfg.depth

    @property
    def d_enc(self) -> int:
        return self.cfg.d_enc

    # -- embedding
    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, n, H, W, 3) in [0,1] -> (B, n*P, 3*p*p)."""
        B, n, H, W, C = images.shape
        p = self.cfg.patch
        x = images.reshape(B, n, H // p, p, W // p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, n * (H // p) * (W // p), p * p * C)

    def embed_images(self, images: torch.Tensor) -> torch.Tensor:
        B, n = images.shape[:2]
        x = self.patch_embed(self.patchify(images) - 0.5)
        P = self.cfg.patches_per_image
        pos = self.patch_pos.unsqueeze(0) + self.image_embed[:n].unsqueeze(1)  # (n, P, d)
        return x + pos.reshape(1, n * P, -1)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        T = ids.shape[1]
        if T > self.cfg.max_text:
            raise ValueError(f"prompt of {T} tokens exceeds max_text={self.cfg.max_text}")
        return self.tok_embed(ids) + self.text_pos[:T]

    def run_layers(self, x: torch.Tensor, layers) -> dict:
        layers = sorted(set(int(l) for l in layers))
        for l in layers:
            if not 1 <= l <= self.cfg.depth:
                raise LayerMissing(l)
        out = {}
        for i, blk in enumerate(self.blocks[: layers[-1]], start=1):
            x = blk(x)
            if i in layers:
                out[i] = x
        return out

    def forward(self, images: torch.Tensor, ids: torch.Tensor, layers) -> dict:
        """images (B, n, H, W, 3), ids (B, T) -> {layer: (B, n*P + T, d)}."""
        x = torch.cat([self.embed_images(images), self.embed_tokens(ids)], dim=1)
        return self.run_layers(x, layers)

    def image_states(self, images: torch.Tensor, layers) -> dict:
        # causal attention: visual-token states never depend on the prompt
        return self.run_layers(self.embed_images(images), layers)

    def text_states(self, ids: torch.Tensor, layers) -> dict:
        return self.run_layers(self.embed_tokens(ids), layers)


def toy_encoder(cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> ToyEncoder:
    """Pipeline factory: enforces the minimum depth the default extraction layers need."""
    if cfg.depth < MIN_DEPTH:
        raise DepthTooSmall(f"encoder depth {cfg.depth} < {MIN_DEPTH}")
    return ToyEncoder(cfg, seed)


class ToyTextEncoder(nn.Module):
    """Separate frozen text-only encoder standing in for a CLIP-style text tower."""

    def __init__(self, d: int = 256, depth: int = 4, heads: int = 4, vocab_size: int = 2048,
                 max_text: int = 128, seed: int = 1):
        super().__init__()
        self.tok_embed = nn.Embedding(vocab_size, d)
        self.pos = nn.Parameter(torch.zeros(max_text, d))
        self.blocks = nn.ModuleList(Block(d, heads, 4) for _ in range(depth))
        self.norm = nn.LayerNorm(d)
        _init_(self.tok_embed, seed, "clip_tok")
        g = torch.Generator().manual_seed(_seed_for(seed, "clip_pos"))
        with torch.no_grad():
            self.pos.copy_(torch.randn(self.pos.shape, generator=g) * 0.02)
        for i, blk in enumerate(self.blocks):
            _init_(blk, seed, f"clip_block{i}")
        self.d_enc = d
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def encode_ids(self, ids) -> np.ndarray:
        ids = torch.as_tensor(np.asarray(ids), dtype=torch.long).reshape(1, -1)
        x = self.tok_embed(ids) + self.pos[: ids.shape[1]]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[0].numpy().astype(np.float32)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


def config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------- warm-up

def alignment_loss(encoder: ToyEncoder, images: torch.Tensor, ids: torch.Tensor, lengths, groups,
                   visual_layer: int = 3, text_layer: int = 12, temperature: float = 0.1):
    """Symmetric multi-positive InfoNCE between pooled image and caption features.

    images (B, 1, H, W, 3); ids (B, T) right-padded; groups (B,) caption ids,
    equal captions count as positives for each other.
    """
    v = encoder.image_states(images, [visual_layer])[visual_layer].mean(dim=1)
    t_states = encoder.text_states(ids, [text_layer])[text_layer]
    mask = (torch.arange(ids.shape[1])[None, :] < lengths[:, None]).float()
    t = (t_states * mask[..., None]).sum(1) / lengths[:, None].float()
    # pooled features differ little between images; standardise over the batch first
    v = (v - v.mean(0)) / (v.std(0) + 1e-6)
    t = (t - t.mean(0)) / (t.std(0) + 1e-6)
    v = F.normalize(encoder.align_v(v), dim=-1)
    t = F.normalize(encoder.align_t(t), dim=-1)
    logits = v @ t.T / temperature
    pos = (groups[:, None] == groups[None, :]).float()
    pos = pos / pos.sum(1, keepdim=True)
    l_vt = -(pos * F.log_softmax(logits, dim=1)).sum(1).mean()
    l_tv = -(pos * F.log_softmax(logits.T, dim=1)).sum(1).mean()
    return 0.5 * (l_vt + l_tv)


def warmup_pretrain(encoder: ToyEncoder, images: np.ndarray, captions, tokenizer, epochs: int = 16,
                    batch: int = 32, lr: float = 1e-3, seed: int = 0, visual_layer: int = 3,
                    text_layer: int = 12):
    """Contrastive image-caption warm-up; returns (loss before, loss after, per-step losses).

    images: (N, H, W, 3) in [0,1]. The encoder is frozen on return.
    """
    if encoder.frozen:
        raise RuntimeError("encoder is already frozen")
    imgs = torch.as_tensor(np.asarray(images, dtype=np.float32)).unsqueeze(1)
    enc_ids = [tokenizer.encode(c)[0] for c in captions]
    T = max(len(x) for x in enc_ids)
    ids = torch.zeros(len(enc_ids), T, dtype=torch.long)
    for i, x in enumerate(enc_ids):
        ids[i, : len(x)] = torch.as_tensor(x)
    lengths = torch.as_tensor([len(x) for x in enc_ids])
    uniq = {c: i for i, c in enumerate(sorted(set(captions)))}
    groups = torch.as_tensor([uniq[c] for c in captions])
    n = len(captions)
    order_rng = np.random.default_rng(seed)

    def full_loss():
        with torch.no_grad():
            perm = np.random.default_rng(seed + 1).permutation(n)
            vals = [alignment_loss(encoder, imgs[idx], ids[idx], lengths[idx], groups[idx],
                                   visual_layer, text_layer).item()
                    for idx in (perm[i:i + batch] for i in range(0, n - batch + 1, batch))]
        return float(np.mean(vals))

    before = full_loss()
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    history = []
    for _ in range(epochs):
        perm = order_rng.permutation(n)
        for i in range(0, n - batch + 1, batch):
            idx = perm[i:i + batch]
            loss = alignment_loss(encoder, imgs[idx], ids[idx], lengths[idx], groups[idx],
                                  visual_layer, text_layer)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
    after = full_loss()
    encoder.freeze()
    return before, after, history

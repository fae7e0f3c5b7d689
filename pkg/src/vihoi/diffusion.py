"""Noise schedules, the forward process and an x0-predicting transformer denoiser."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import BadT, ShapeMismatch
from .motion import MODEL_DIM


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def beta(self):
        return 1.0 - self.alpha


def make_schedule(kind: str = "cosine", T: int = 1000, s: float = 0.008,
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise BadT(f"schedule needs T >= 2, got {T}")
    T = int(T)
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        f = np.cos(((np.arange(T + 1) / T) + s) / (1 + s) * np.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(kind, T, alpha, alpha_bar)


def _coef(values, t, like):
    v = values[t]
    if isinstance(like, torch.Tensor):
        v = torch.as_tensor(v, dtype=like.dtype)
        while v.dim() < like.dim():
            v = v.unsqueeze(-1)
        return v
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t may be a scalar or one index per batch row."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise BadT(f"t must lie in [0, {sched.T})")
    ab = _coef(sched.alpha_bar, t, x0)
    return ab ** 0.5 * x0 + (1 - ab) ** 0.5 * eps


def q_step(x_prev, t, eps, sched: NoiseSchedule):
    """One forward transition q(x_t | x_{t-1}); x_prev is x0 when t = 0."""
    a = _coef(sched.alpha, np.asarray(t), x_prev)
    return a ** 0.5 * x_prev + (1 - a) ** 0.5 * eps


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Ascending strided timesteps ending at T-1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return np.array([T - 1])
    return np.unique(np.round(np.linspace(0, T - 1, min(steps, T))).astype(int))


def posterior(x_t, x0_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """Mean and variance of q(x_{t_prev} | x_t, x0) for a strided step t -> t_prev."""
    ab_t = sched.alpha_bar[t]
    ab_p = sched.alpha_bar[t_prev]
    a_eff = ab_t / ab_p
    b_eff = 1.0 - a_eff
    mean = (ab_p ** 0.5 * b_eff / (1 - ab_t)) * x0_hat + (a_eff ** 0.5 * (1 - ab_p) / (1 - ab_t)) * x_t
    var = b_eff * (1 - ab_p) / (1 - ab_t)
    return mean, var


def ddpm_sample_loop(predict_x0, shape, sched: NoiseSchedule, steps: int = 100, seed=0):
    """Ancestral sampling from x_T ~ N(0, I); the last step returns x0_hat without noise.

    `predict_x0(x_t, t)` maps numpy (B, L, D) -> (B, L, D). `seed` is an int or one
    seed per batch row; each row draws its noise from its own generator so a
    row's result does not depend on what else is in the batch.
    """
    seeds = [seed] * shape[0] if np.isscalar(seed) else list(seed)
    if len(seeds) != shape[0]:
        raise ValueError("need one seed per batch row")
    rngs = [np.random.default_rng(s) for s in seeds]
    noise = lambda: np.stack([r.standard_normal(shape[1:]) for r in rngs])  # noqa: E731
    ts = sampling_timesteps(sched.T, steps)[::-1]
    x = noise()
    for i, t in enumerate(ts):
        x0_hat = np.asarray(predict_x0(x, int(t)), dtype=np.float64)
        if i == len(ts) - 1:
            return x0_hat
        mean, var = posterior(x, x0_hat, int(t), int(ts[i + 1]), sched)
        x = mean + var ** 0.5 * noise()
    return x


# ---------------------------------------------------------------- denoiser

@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 256
    layers: int = 6
    heads: int = 4
    max_len: int = 256
    geometry_embed_dim: int = 256
    motion_dim: int = MODEL_DIM
    geometry: str = "bps"            # bps | keypoint24
    geometry_input_dim: int = 1024   # BPS basis size, or 72 for keypoints
    geometry_fusion: str = "add"     # add | concat
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    def to_dict(self):
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, mult):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, mult * d), nn.GELU(), nn.Linear(mult * d, d))

    def forward(self, x, key_mask):
        B, N, D = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).view(B, N, 3, h, D // h).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        a = torch.softmax(logits, dim=-1) @ v
        x = x + self.out(a.transpose(1, 2).reshape(B, N, D))
        return x + self.ff(self.norm2(x))


class Denoiser(nn.Module):
    """Tokens [time | c_v | c_t | (geometry) | motion]; output read from the motion positions."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self._build(cfg)

    def _build(self, cfg):
        self.cfg = cfg
        d = cfg.d_model
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.in_proj = nn.Linear(cfg.motion_dim, d)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, d) * 0.02)
        self.type_embed = nn.Parameter(torch.randn(4, d) * 0.02)  # time, c_v, c_t, geometry
        if cfg.geometry == "bps":
            self.geom_enc = nn.Sequential(nn.Linear(cfg.geometry_input_dim, 512), nn.SiLU(),
                                          nn.Linear(512, cfg.geometry_embed_dim))
        elif cfg.geometry == "keypoint24":
            self.geom_enc = nn.Linear(cfg.geometry_input_dim, cfg.geometry_embed_dim)
        else:
            raise ValueError(f"unknown geometry path {cfg.geometry!r}")
        self.geom_proj = nn.Linear(cfg.geometry_embed_dim, d)
        self.layers = nn.ModuleList(EncoderLayer(d, cfg.heads, cfg.ffn_mult) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.motion_dim)

    def embed_geometry(self, geom_input: torch.Tensor) -> torch.Tensor:
        return self.geom_enc(geom_input)

    def forward(self, x_t, t, c_v, c_t, geom, mask=None):
        """x_t (B, L, D); t (B,); c_v (B, kv, d); c_t (B, kt, d); geom (B, geometry_embed_dim).

        mask (B, L) marks valid frames; padded frames are excluded as keys.
        """
        B, L, D = x_t.shape
        cfg = self.cfg
        if D != cfg.motion_dim or L > cfg.max_len:
            raise ShapeMismatch(f"motion shape {tuple(x_t.shape)} incompatible with config")
        if c_v.shape[0] != B or c_t.shape[0] != B or geom.shape != (B, cfg.geometry_embed_dim):
            raise ShapeMismatch("conditioning batch sizes or widths disagree with x_t")
        if c_v.shape[-1] != cfg.d_model or c_t.shape[-1] != cfg.d_model:
            raise ShapeMismatch("prior tokens must have width d_model")
        if mask is None:
            mask = torch.ones(B, L, dtype=torch.bool)
        dtype = x_t.dtype
        te = self.time_mlp(timestep_embedding(t, cfg.d_model).to(dtype)) + self.type_embed[0]
        g = self.geom_proj(geom)
        motion = self.in_proj(x_t) + self.pos[:L]
        prefix = [te[:, None], c_v + self.type_embed[1], c_t + self.type_embed[2]]
        if cfg.geometry_fusion == "add":
            motion = motion + g[:, None]
        else:
            prefix.append((g + self.type_embed[3])[:, None])
        prefix = torch.cat(prefix, dim=1)
        x = torch.cat([prefix, motion], dim=1)
        key_mask = torch.cat([torch.ones(B, prefix.shape[1], dtype=torch.bool), mask], dim=1)
        for layer in self.layers:
            x = layer(x, key_mask)
        return self.out_proj(self.norm(x[:, prefix.shape[1]:]))


def masked_mse(pred, target, mask=None):
    """Mean squared error over valid frames and all feature dims."""
    err = (pred - target) ** 2
    if mask is None:
        return err.mean()
    m = mask.to(err.dtype)[..., None]
    return (err * m).sum() / (m.sum() * err.shape[-1])

"""Q-Former adapters turning a variable-length prior E (n x d_enc) into k prior tokens.

Z = LayerNorm(E W + b); k learnable queries then pass through two
cross-attention layers in which Z is both key and value (residual + post-norm).
Z carries no positional encoding, so the output does not depend on row order.
"""
from __future__ import annotations

import hashlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import WidthMismatch


def _gen(seed: int, tag: str) -> torch.Generator:
    h = hashlib.sha256(f"adapter:{seed}:{tag}".encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(h[:8], "little") & ((1 << 63) - 1))


def _uniform_(w: torch.Tensor, g: torch.Generator):
    fan_out, fan_in = w.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.copy_((torch.rand(w.shape, generator=g) * 2 - 1) * bound)


class CrossAttention(nn.Module):
    def __init__(self, d, heads, g):
        super().__init__()
        if d % heads:
            raise ValueError("d_model must be divisible by heads")
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(d, d))
        self.w_k = nn.Parameter(torch.empty(d, d))
        self.w_v = nn.Parameter(torch.empty(d, d))
        self.w_o = nn.Parameter(torch.empty(d, d))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            _uniform_(w, g)
        self.norm = nn.LayerNorm(d)

    def attend(self, q_in, kv, key_mask=None):
        """q_in (B, k, d), kv (B, n, d), key_mask (B, n) True where valid."""
        B, k, d = q_in.shape
        h, dh = self.heads, d // self.heads
        q = (q_in @ self.w_q.T).view(B, k, h, dh)
        # k << n: fold W_k into the queries and apply W_v after pooling, so the
        # n keys/values are never projected (same result as projecting them)
        qk = torch.einsum("bkhe,hed->bkhd", q, self.w_k.view(h, dh, d))
        logits = torch.einsum("bkhd,bnd->bhkn", qk, kv) / math.sqrt(dh)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        pooled = torch.einsum("bhkn,bnd->bkhd", torch.softmax(logits, dim=-1), kv)
        a = torch.einsum("bkhd,hed->bkhe", pooled, self.w_v.view(h, dh, d))
        return a.reshape(B, k, d) @ self.w_o.T


class QFormer(nn.Module):
    def __init__(self, d_enc: int, d_model: int, k: int = 1, heads: int = 4, ffn: bool = False,
                 seed: int = 0, tag: str = "visual"):
        super().__init__()
        if k < 1:
            raise ValueError("k must be >= 1")
        g = _gen(seed, tag)
        self.d_enc, self.d_model, self.k = d_enc, d_model, k
        self.proj = nn.Linear(d_enc, d_model)
        _uniform_(self.proj.weight, g)
        with torch.no_grad():
            self.proj.bias.zero_()
        self.norm = nn.LayerNorm(d_model)
        self.queries = nn.Parameter(torch.randn(k, d_model, generator=g) * 0.02)
        self.attn = nn.ModuleList(CrossAttention(d_model, heads, g) for _ in range(2))
        self.ffn = None
        if ffn:
            self.ffn = nn.ModuleList(
                nn.Sequential(nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model))
                for _ in range(2))
            self.ffn_norm = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(2))

    def forward(self, E, mask=None):
        return qformer_forward(E, self, mask)


def project_normalize(E: torch.Tensor, params: QFormer) -> torch.Tensor:
    if E.shape[-1] != params.d_enc:
        raise WidthMismatch(f"prior width {E.shape[-1]} != adapter d_enc {params.d_enc}")
    return F.layer_norm(params.proj(E), (params.d_model,), params.norm.weight, params.norm.bias)


def qformer_forward(E: torch.Tensor, params: QFormer, mask=None) -> torch.Tensor:
    """E (n, d_enc) -> (k, d_model); batched E (B, n, d_enc) -> (B, k, d_model)."""
    single = E.dim() == 2
    if single:
        E = E.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    if E.shape[1] < 1:
        raise ValueError("prior must have at least one row")
    Z = project_normalize(E, params)
    x = params.queries.unsqueeze(0).expand(E.shape[0], -1, -1)
    for i, ca in enumerate(params.attn):
        x = ca.norm(x + ca.attend(x, Z, mask))
        if params.ffn is not None:
            x = params.ffn_norm[i](x + params.ffn[i](x))
    return x[0] if single else x


class PoolAdapter(nn.Module):
    """Mean-pool then a linear map; replaces the Q-Former in the pooling ablation."""

    def __init__(self, d_enc: int, d_model: int, k: int = 1, seed: int = 0, tag: str = "visual"):
        super().__init__()
        self.d_enc, self.d_model, self.k = d_enc, d_model, k
        self.proj = nn.Linear(d_enc, k * d_model)
        _uniform_(self.proj.weight, _gen(seed, "pool-" + tag))
        with torch.no_grad():
            self.proj.bias.zero_()

    def forward(self, E, mask=None):
        if E.shape[-1] != self.d_enc:
            raise WidthMismatch(f"prior width {E.shape[-1]} != adapter d_enc {self.d_enc}")
        single = E.dim() == 2
        if single:
            E = E.unsqueeze(0)
            mask = None if mask is None else mask.unsqueeze(0)
        if mask is None:
            pooled = E.mean(dim=1)
        else:
            m = mask.to(E.dtype).unsqueeze(-1)
            pooled = (E * m).sum(1) / m.sum(1).clamp_min(1.0)
        out = self.proj(pooled).view(E.shape[0], self.k, self.d_model)
        return out[0] if single else out


def make_adapters(d_enc: int, d_model: int, k_visual: int = 1, k_text: int = 1, seed: int = 0,
                  heads: int = 4, ffn: bool = False, variant: str = "qformer"):
    """Two independently initialised adapters (visual, text)."""
    if variant == "qformer":
        return (QFormer(d_enc, d_model, k_visual, heads, ffn, seed, "visual"),
                QFormer(d_enc, d_model, k_text, heads, ffn, seed, "text"))
    if variant == "pool":
        return (PoolAdapter(d_enc, d_model, k_visual, seed, "visual"),
                PoolAdapter(d_enc, d_model, k_text, seed, "text"))
    raise ValueError(f"unknown adapter variant {variant!r}")

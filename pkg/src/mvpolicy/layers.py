"""Shared neural building blocks: MLPs, multi-head attention with additive
logit biases / key masking / rotary position encodings, pre-norm residual
wrappers, and sinusoidal timestep features.

All modules accept inputs with arbitrary leading batch dims: (..., L, D).
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .numcore import preserve_init


class MLP(nn.Module):
    """Linear stack with an activation between layers (none after the last)."""

    def __init__(self, dims, activation=nn.GELU, zero_init_last=False):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        layers = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(activation())
        self.net = nn.Sequential(*layers)
        if zero_init_last:
            last = self.net[-1]
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)
            preserve_init(last.weight)
            preserve_init(last.bias)

    def forward(self, x):
        return self.net(x)


def rotate_half(x: torch.Tensor) -> torch.Tensor:
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat([-x2, x1], dim=-1)


def rope_angles(positions: torch.Tensor, head_dim: int, max_pos: int,
                dtype: torch.dtype) -> torch.Tensor:
    """Rotary phase angles for integer positions, clamped to [0, max_pos-1]."""
    if head_dim % 2 != 0:
        raise ValueError("rotary embeddings need an even head dim")
    pos = positions.clamp(0, max_pos - 1).to(dtype)
    idx = torch.arange(head_dim // 2, dtype=dtype)
    inv_freq = 10000.0 ** (-2.0 * idx / head_dim)
    ang = pos[..., None] * inv_freq  # (..., L, head_dim/2)
    return torch.cat([ang, ang], dim=-1)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, max_pos: int) -> torch.Tensor:
    """Rotate per-head features by position-dependent phases. x: (..., L, head_dim)."""
    ang = rope_angles(positions, x.shape[-1], max_pos, x.dtype)
    return x * torch.cos(ang) + rotate_half(x) * torch.sin(ang)


class Attention(nn.Module):
    """Multi-head attention with optional additive logit bias, key masking,
    and rotary position encodings on queries/keys.

    bias: broadcastable to (heads, Lq, Lk), added to logits pre-softmax.
    key_mask: bool (..., Lk), True = attendable; False keys get zero weight.
    q_pos/k_pos: integer positions enabling rotary encoding (with rope_max_pos).
    """

    def __init__(self, dim, num_heads, kv_dim=None, rope_max_pos=None):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError("dim must be divisible by num_heads")
        kv_dim = kv_dim or dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.rope_max_pos = rope_max_pos
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key=None, value=None, *, bias=None, key_mask=None,
                q_pos=None, k_pos=None, key_bias=None, return_weights=False):
        key = query if key is None else key
        value = key if value is None else value
        lead = query.shape[:-2]
        lq, lk = query.shape[-2], key.shape[-2]
        q = self.q_proj(query).reshape(*lead, lq, self.num_heads, self.head_dim)
        k = self.k_proj(key)
        if key_bias is not None:
            k = k + key_bias
        k = k.reshape(*lead, lk, self.num_heads, self.head_dim)
        v = self.v_proj(value).reshape(*lead, lk, self.num_heads, self.head_dim)
        if self.rope_max_pos is not None:
            if q_pos is not None:
                q = apply_rope(q.transpose(-2, -3), q_pos[..., None, :],
                               self.rope_max_pos).transpose(-2, -3)
            if k_pos is not None:
                k = apply_rope(k.transpose(-2, -3), k_pos[..., None, :],
                               self.rope_max_pos).transpose(-2, -3)
        q = q.transpose(-2, -3)  # (..., heads, Lq, hd)
        k = k.transpose(-2, -3)
        v = v.transpose(-2, -3)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if bias is not None:
            logits = logits + bias
        if key_mask is not None:
            neg = torch.finfo(logits.dtype).min
            logits = logits.masked_fill(~key_mask[..., None, None, :], neg)
        weights = torch.softmax(logits, dim=-1)
        out = weights @ v
        out = out.transpose(-2, -3).reshape(*lead, lq, self.num_heads * self.head_dim)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class ResidualAttention(nn.Module):
    """Pre-norm residual attention: x + Attn(LN(x), kv)."""

    def __init__(self, dim, num_heads, kv_dim=None, rope_max_pos=None, norm_kv=False):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim or dim) if norm_kv else None
        self.attn = Attention(dim, num_heads, kv_dim=kv_dim, rope_max_pos=rope_max_pos)

    def forward(self, x, kv=None, **kwargs):
        h = self.norm(x)
        if kv is None:
            out = self.attn(h, **kwargs)
        else:
            if self.norm_kv is not None:
                kv = self.norm_kv(kv)
            out = self.attn(h, kv, **kwargs)
        if isinstance(out, tuple):
            return x + out[0], out[1]
        return x + out


class ResidualFFN(nn.Module):
    """Pre-norm residual feed-forward: x + FFN(LN(x))."""

    def __init__(self, dim, hidden=None):
        super().__init__()
        hidden = hidden or 4 * dim
        self.norm = nn.LayerNorm(dim)
        self.ffn = MLP([dim, hidden, dim])

    def forward(self, x):
        return x + self.ffn(self.norm(x))


class ReZeroWrapper(nn.Module):
    """Gated residual z + alpha * F(LN(z)) with alpha learnable, initialized to 0."""

    def __init__(self, dim, inner: nn.Module):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.inner = inner
        self.alpha = nn.Parameter(torch.zeros(()))
        preserve_init(self.alpha)

    def forward(self, z, *args, **kwargs):
        return z + self.alpha * self.inner(self.norm(z), *args, **kwargs)


def sinusoidal_embedding(t: torch.Tensor, dim: int,
                         dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard sin/cos features of scalar timesteps. t: (...,) -> (..., dim)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    idx = torch.arange(half, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * idx / half)
    ang = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return emb.to(dtype)

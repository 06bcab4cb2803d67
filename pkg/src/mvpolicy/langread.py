"""Language-guided multi-view readout.

Frozen toy embedders stand in for a pretrained text/vision encoder: text
tokens are seeded hashes of whitespace words expanded by a fixed
pseudo-random projection; patch tokens are a fixed seeded linear projection
of non-overlapping image patches. Text tokens then act as latent queries in
M Perceiver-style blocks (cross-attention to patches, FFN, masked latent
self-attention, FFN — each ReZero-gated, so the stack is the identity at
initialization), and attention pooling compresses each stream to R context
tokens. The assembled context is [pooled text; pooled view 1; ...; view V].
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ReadoutConfig
from .layers import MLP, Attention, ReZeroWrapper, ResidualFFN
from .numcore import Rng

PATCH_EMBED_SEED = 0x7EA7
EMB_MAGIC = b"PEAFEMB1"


@dataclass
class TextTokens:
    tokens: np.ndarray  # (K_txt, D_c) float32
    mask: np.ndarray    # (K_txt,) bool, True = real token

    def __post_init__(self):
        if self.tokens.shape[0] != self.mask.shape[0]:
            raise ValueError("token/mask length mismatch")


def _word_vector(word: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(word.encode()).digest()[:8], "little")
    return (Rng(seed).normal(size=dim) / np.sqrt(dim)).astype(np.float32)


def toy_text_embed(instruction: str, dim: int, max_tokens: int) -> TextTokens:
    """Deterministic per-word embeddings, padded/truncated to max_tokens."""
    words = instruction.split()
    if not words:
        raise ValueError("instruction must be nonempty")
    words = words[:max_tokens]
    tokens = np.zeros((max_tokens, dim), dtype=np.float32)
    mask = np.zeros(max_tokens, dtype=bool)
    for i, w in enumerate(words):
        tokens[i] = _word_vector(w, dim)
        mask[i] = True
    return TextTokens(tokens=tokens, mask=mask)


class PatchEmbed(nn.Module):
    """Frozen seeded linear projection of non-overlapping patches.

    Weights are buffers generated from a fixed seed: deterministic and
    excluded from the optimizer. Partial boundary patches are
    dropped (floor grid).
    """

    def __init__(self, dim: int, patch_size: int):
        super().__init__()
        self.patch = patch_size
        in_dim = 3 * patch_size * patch_size
        rng = Rng(PATCH_EMBED_SEED)
        weight = rng.normal(size=(in_dim, dim)) / np.sqrt(in_dim)
        bias = rng.normal(size=(dim,)) / np.sqrt(dim)
        self.register_buffer("weight", torch.from_numpy(weight.astype(np.float32)))
        self.register_buffer("bias", torch.from_numpy(bias.astype(np.float32)))

    def num_patches(self, height: int, width: int) -> int:
        return (height // self.patch) * (width // self.patch)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (..., 3, H, W) in [0, 1] -> (..., N_p, D_c).

        The projection is a frozen buffer (never trained), but gradients
        still flow through it to the image input.
        """
        p = self.patch
        lead = images.shape[:-3]
        h, w = images.shape[-2] // p, images.shape[-1] // p
        x = images[..., :h * p, :w * p]
        x = x.reshape(*lead, 3, h, p, w, p)
        x = x.permute(*range(len(lead)), -4, -2, -5, -3, -1)  # (..., h, w, 3, p, p)
        x = x.reshape(*lead, h * w, 3 * p * p)
        weight = self.weight.to(images.dtype)
        bias = self.bias.to(images.dtype)
        return x @ weight + bias


class LatentBlock(nn.Module):
    """One Perceiver-style block over text latents Z given patch tokens X.

    Sub-layers (each z + alpha * F(LN(z)), alpha initialized to 0):
    cross-attention (Z queries, X keys/values), FFN, masked latent
    self-attention, FFN.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.cross = ReZeroWrapper(dim, Attention(dim, heads))
        self.ffn1 = ReZeroWrapper(dim, MLP([dim, 4 * dim, dim]))
        self.self_attn = ReZeroWrapper(dim, Attention(dim, heads))
        self.ffn2 = ReZeroWrapper(dim, MLP([dim, 4 * dim, dim]))

    def forward(self, z: torch.Tensor, x: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
        z = self.cross(z, x)
        z = self.ffn1(z)
        z = self.self_attn(z, key_mask=mask)
        return self.ffn2(z)


class AttentionPool(nn.Module):
    """R learned queries attend to an input token set over `layers` rounds,
    then project to the output width. Masked inputs contribute nothing.
    """

    def __init__(self, in_dim: int, out_dim: int, num_queries: int,
                 layers: int, heads: int):
        super().__init__()
        self.queries = nn.Parameter(torch.zeros(num_queries, in_dim))
        nn.init.normal_(self.queries, std=1.0 / np.sqrt(in_dim))
        self.attn = nn.ModuleList(Attention(in_dim, heads) for _ in range(layers))
        self.norms = nn.ModuleList(nn.LayerNorm(in_dim) for _ in range(layers))
        self.ffns = nn.ModuleList(ResidualFFN(in_dim) for _ in range(layers))
        self.out = nn.Linear(in_dim, out_dim)

    def forward(self, tokens: torch.Tensor, mask=None, return_weights=False):
        """tokens: (..., L, in_dim), mask: (..., L) bool -> (..., R, out_dim).

        With return_weights, also returns the final layer's attention map
        (..., heads, R, L).
        """
        lead = tokens.shape[:-2]
        q = self.queries.expand(*lead, *self.queries.shape)
        weights = None
        for i, (attn, norm, ffn) in enumerate(zip(self.attn, self.norms,
                                                  self.ffns)):
            if return_weights and i == len(self.attn) - 1:
                delta, weights = attn(norm(q), tokens, key_mask=mask,
                                      return_weights=True)
                q = q + delta
            else:
                q = q + attn(norm(q), tokens, key_mask=mask)
            q = ffn(q)
        out = self.out(q)
        return (out, weights) if return_weights else out


class LanguageReadout(nn.Module):
    """Full readout: latent stack shared across views + per-stream pooling."""

    def __init__(self, cfg: ReadoutConfig, out_dim: int):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.context_dim, cfg.patch_size)
        self.blocks = nn.ModuleList(
            LatentBlock(cfg.context_dim, cfg.latent_heads)
            for _ in range(cfg.latent_blocks))
        self.view_pool = AttentionPool(cfg.context_dim, out_dim, cfg.readouts,
                                       cfg.pool_layers, cfg.pool_heads)
        self.text_pool = AttentionPool(cfg.context_dim, out_dim, cfg.readouts,
                                       cfg.pool_layers, cfg.pool_heads)

    def grounded_latents(self, text: torch.Tensor, mask: torch.Tensor,
                         patches: torch.Tensor) -> torch.Tensor:
        """text: (B, K, D); mask: (B, K); patches: (B, V, N_p, D) -> (B, V, K, D)."""
        v = patches.shape[1]
        z = text[:, None].expand(-1, v, -1, -1)
        m = mask[:, None].expand(-1, v, -1)
        for block in self.blocks:
            z = block(z, patches, m)
        return z

    def forward(self, text: torch.Tensor, mask: torch.Tensor,
                patches: torch.Tensor) -> torch.Tensor:
        """Assembled context S: (B, R * (1 + V), out_dim); text stream first."""
        latents = self.grounded_latents(text, mask, patches)
        pooled_views = self.view_pool(latents, mask[:, None].expand(-1, latents.shape[1], -1))
        r_txt = self.text_pool(text, mask)
        b, v, r, d = pooled_views.shape
        return torch.cat([r_txt, pooled_views.reshape(b, v * r, d)], dim=1)


def assemble_context(r_txt: torch.Tensor, view_readouts) -> torch.Tensor:
    """Concatenate pooled text and per-view readouts: (..., R*(1+V), d)."""
    if len(view_readouts) == 0:
        raise ValueError("at least one view readout required")
    return torch.cat([r_txt, *view_readouts], dim=-2)


def save_embeddings(path, text: TextTokens, patch_tokens: np.ndarray) -> None:
    """PEAFEMB1 container: magic, D_c, K_txt, V, N_p, then f32 payloads."""
    patch_tokens = np.asarray(patch_tokens, dtype=np.float32)
    if patch_tokens.ndim != 3:
        raise ValueError("patch tokens must be (V, N_p, D_c)")
    dim = patch_tokens.shape[2]
    if text.tokens.shape[1] != dim:
        raise ValueError("text/patch embedding widths differ")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IIII", dim, text.tokens.shape[0],
                             patch_tokens.shape[0], patch_tokens.shape[1]))
        fh.write(text.tokens.astype("<f4").tobytes())
        fh.write(np.packbits(text.mask).tobytes())
        fh.write(patch_tokens.astype("<f4").tobytes())


def load_embeddings(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(EMB_MAGIC))
        if magic != EMB_MAGIC:
            raise ValueError("not an embedding container (bad magic)")
        dim, k_txt, n_views, n_patch = struct.unpack("<IIII", fh.read(16))

        def take(n_bytes):
            payload = fh.read(n_bytes)
            if len(payload) != n_bytes:
                raise ValueError("truncated embedding container")
            return payload

        text = np.frombuffer(take(4 * k_txt * dim), dtype="<f4").reshape(k_txt, dim)
        mask_bytes = take((k_txt + 7) // 8)
        mask = np.unpackbits(np.frombuffer(mask_bytes, dtype=np.uint8))[:k_txt].astype(bool)
        patches = np.frombuffer(take(4 * n_views * n_patch * dim), dtype="<f4")
        patches = patches.reshape(n_views, n_patch, dim)
    return TextTokens(tokens=text.copy(), mask=mask), patches.copy()

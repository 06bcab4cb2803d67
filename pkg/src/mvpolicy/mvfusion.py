"""Geometry-guided multi-view token fusion.

Pipeline per observation: shared convolutional encoders produce 4-level RGB
and depth feature pyramids per view; pyramids are flattened into co-located
token sequences; each RGB/depth token pair is locally fused by a length-2
attention block feeding a per-token depth-bin classifier; the resulting depth
distributions lift tokens to expected 3D anchors and distribution-weighted
point embeddings; tokens then aggregate RGB features from their K nearest
cross-view neighbors (distance softmax over anchor distances) through a gated
residual; finally RGB token, depth token, and point embedding fuse into one
geometry-enhanced token per location.

Neighbor selection runs in numpy at float32 and is treated as a
non-differentiable index set; distances are recomputed in torch so gradients
flow through the softmax weights and anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import camgeom
from .config import EncoderConfig, FusionConfig
from .layers import MLP, ResidualAttention, ResidualFFN
from .numcore import preserve_init

# Floor applied to squared anchor distances before the root so coincident
# anchors keep finite gradients; equivalent to flooring delta at 1e-6 m.
DELTA_SQ_FLOOR = 1e-12


@dataclass
class TorchGeometry:
    """Token geometry constants as torch tensors, plus level bookkeeping."""

    centers: np.ndarray        # (N, 2) float64 pixel centers
    strides: np.ndarray        # (N,) int64
    level_ids: torch.Tensor    # (N,) int64 pyramid level per token
    grids: list                # [(h_l, w_l)]
    origins: torch.Tensor      # (V, 3)
    rays: torch.Tensor         # (V, N, 3)
    depths: torch.Tensor       # (B,)

    @property
    def num_views(self) -> int:
        return self.origins.shape[0]

    @property
    def tokens_per_view(self) -> int:
        return self.rays.shape[1]

    def to(self, dtype: torch.dtype) -> "TorchGeometry":
        return TorchGeometry(self.centers, self.strides, self.level_ids, self.grids,
                             self.origins.to(dtype), self.rays.to(dtype),
                             self.depths.to(dtype))


def torch_geometry(geo: camgeom.TokenGeometry, dtype=torch.float32) -> TorchGeometry:
    level_ids = np.concatenate([np.full(h * w, l, dtype=np.int64)
                                for l, (h, w) in enumerate(geo.grids)])
    return TorchGeometry(
        centers=geo.centers, strides=geo.strides,
        level_ids=torch.from_numpy(level_ids), grids=list(geo.grids),
        origins=torch.from_numpy(geo.origins).to(dtype),
        rays=torch.from_numpy(geo.rays).to(dtype),
        depths=torch.from_numpy(geo.depths).to(dtype))


class PyramidEncoder(nn.Module):
    """Strided conv stack: stride-4 stem then four stride-2 stages whose
    outputs (strides 8/16/32/64) are mapped to a common width by 1x1 convs.
    Stage outputs are cropped to the floor-division token grids so token
    counts match the center arithmetic at any resolution.
    """

    def __init__(self, in_channels: int, base: int, out_dim: int):
        super().__init__()
        widths = [base, 2 * base, 4 * base, 8 * base]
        self.stem = nn.Conv2d(in_channels, base, kernel_size=4, stride=4)
        stages, maps = [], []
        prev = base
        for w in widths:
            stages.append(nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1))
            maps.append(nn.Conv2d(w, out_dim, kernel_size=1))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.maps = nn.ModuleList(maps)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor, grids) -> list:
        """x: (B, C, H, W) -> [(B, out_dim, h_l, w_l)] per level."""
        x = self.act(self.stem(x))
        levels = []
        for stage, proj, (h, w) in zip(self.stages, self.maps, grids):
            x = self.act(stage(x))
            x = x[:, :, :h, :w]
            levels.append(proj(x))
        return levels


def flatten_pyramid(levels) -> torch.Tensor:
    """Row-major flatten per level, finest level first: -> (B, N, C)."""
    flat = [lv.flatten(2).transpose(1, 2) for lv in levels]
    return torch.cat(flat, dim=1)


class PairFusion(nn.Module):
    """Per-token RGB-D local fusion over a length-2 sequence.

    The RGB token is projected to the depth width, stacked with the depth
    token, and passed through one pre-norm residual attention block plus a
    residual FFN. Outputs (r_hat, d_hat) feed the depth head only; the main
    RGB token stream is left untouched.
    """

    def __init__(self, token_dim: int, depth_dim: int, heads: int, ffn: int):
        super().__init__()
        self.rgb_proj = nn.Linear(token_dim, depth_dim, bias=False)
        self.attn = ResidualAttention(depth_dim, heads)
        self.ffn = ResidualFFN(depth_dim, ffn)

    def forward(self, rgb: torch.Tensor, dep: torch.Tensor, fuse: bool = True):
        """rgb: (..., d), dep: (..., d_dep) -> (r_hat, d_hat) each (..., d_dep)."""
        r = self.rgb_proj(rgb)
        if not fuse:
            return r, dep
        pair = torch.stack([r, dep], dim=-2)
        shape = pair.shape
        pair = pair.reshape(-1, 2, shape[-1])
        pair = self.ffn(self.attn(pair))
        pair = pair.reshape(shape)
        return pair[..., 0, :], pair[..., 1, :]


class DepthHead(nn.Module):
    """Two-layer MLP + softmax over depth bins, on concatenated (r_hat, d_hat)."""

    def __init__(self, depth_dim: int, num_bins: int):
        super().__init__()
        self.mlp = MLP([2 * depth_dim, 2 * depth_dim, num_bins])

    def forward(self, r_hat: torch.Tensor, d_hat: torch.Tensor) -> torch.Tensor:
        logits = self.mlp(torch.cat([r_hat, d_hat], dim=-1))
        return torch.softmax(logits, dim=-1)


class PointEmbed(nn.Module):
    """Two-layer MLP from 3D coordinates to point features.

    `expected_embed` evaluates the distribution-weighted sum over per-bin
    backprojections without materializing the second matmul per bin: with
    x_i = o + d_i * r, the first layer is linear in d_i, so the weighted sum
    commutes with the output layer.
    """

    def __init__(self, out_dim: int, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(3, hidden)
        self.lin2 = nn.Linear(hidden, out_dim)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(self.act(self.lin1(x)))

    def expected_embed(self, probs: torch.Tensor, origins: torch.Tensor,
                       rays: torch.Tensor, depths: torch.Tensor,
                       chunk: int = 16) -> torch.Tensor:
        """sum_i p_i * phi(o + d_i * r).

        probs: (..., V, N, B); origins: (V, 3); rays: (V, N, 3); depths: (B,).
        Bins are processed in chunks to bound peak memory.
        """
        a0 = self.lin1(origins)                      # (V, h)
        m = rays @ self.lin1.weight.t()              # (V, N, h)
        num_bins = depths.shape[0]
        acc = None
        for start in range(0, num_bins, chunk):
            d = depths[start:start + chunk]          # (C,)
            p = probs[..., start:start + chunk]      # (..., V, N, C)
            # (V, N, C, h): first-layer pre-activations at each bin depth
            pre = a0[:, None, None, :] + d[None, None, :, None] * m[:, :, None, :]
            part = torch.einsum("...vnc,vnch->...vnh", p, self.act(pre))
            acc = part if acc is None else acc + part
        mass = probs.sum(dim=-1, keepdim=True)       # == 1 up to float error
        return acc @ self.lin2.weight.t() + mass * self.lin2.bias


def lift(probs: torch.Tensor, phi: PointEmbed, geo: TorchGeometry):
    """Depth distributions -> (anchors, point_embeds).

    anchors = o + E[d] * r (exactly the distribution-weighted sum of per-bin
    backprojections, by linearity); point embeds are the weighted phi sums.
    probs: (..., V, N, B) -> anchors (..., V, N, 3), embeds (..., V, N, d).
    """
    exp_d = probs @ geo.depths                       # (..., V, N)
    anchors = geo.origins[:, None, :] + exp_d[..., None] * geo.rays
    embeds = phi.expected_embed(probs, geo.origins, geo.rays, geo.depths)
    return anchors, embeds


def select_neighbors(anchors: np.ndarray, k: int):
    """Top-K cross-view neighbor indices per token, deterministic tie-break.

    anchors: (V, N, 3) float32. Returns int64 (V, N, K_eff) of flat indices
    into the (V*N) token list. Candidates for view v are all tokens of other
    views, ordered by (view, token) ascending; ties in distance keep that
    order (stable sort), so equality with a brute-force scan is exact.
    """
    anchors = np.ascontiguousarray(anchors, dtype=np.float32)
    num_views, n_tok, _ = anchors.shape
    flat = anchors.reshape(-1, 3)
    all_idx = np.arange(num_views * n_tok, dtype=np.int64)
    out = []
    for v in range(num_views):
        cand = all_idx[(all_idx // n_tok) != v]      # ascending == tie-break order
        cand_anchor = flat[cand]                     # (Nc, 3)
        k_eff = min(k, cand.shape[0])
        if k_eff == 0:
            return np.zeros((num_views, n_tok, 0), dtype=np.int64)
        rows = []
        for start in range(0, n_tok, 256):
            q = anchors[v, start:start + 256]        # (nq, 3)
            diff = q[:, None, :] - cand_anchor[None, :, :]
            dist = np.sqrt(np.maximum((diff * diff).sum(-1), DELTA_SQ_FLOOR))
            rows.append(_topk_rows(dist, cand, k_eff))
        out.append(np.concatenate(rows, axis=0))
    return np.stack(out, axis=0)


def _topk_rows(dist: np.ndarray, cand: np.ndarray, k: int) -> np.ndarray:
    """Per-row K smallest with (candidate order)-stable tie handling."""
    nq, nc = dist.shape
    sel = np.empty((nq, k), dtype=np.int64)
    if k >= nc:
        base = np.argsort(dist, axis=1, kind="stable")
        return cand[base[:, :k]]
    part = np.argpartition(dist, k - 1, axis=1)[:, :k]
    for i in range(nq):
        row = dist[i]
        dk = row[part[i]].max()
        pool = np.flatnonzero(row <= dk)             # ascending candidate order
        order = np.argsort(row[pool], kind="stable")
        sel[i] = cand[pool[order[:k]]]
    return sel


def aggregate(rgb_tokens: torch.Tensor, anchors: torch.Tensor,
              neighbor_idx: torch.Tensor, tau: float, return_alpha: bool = False):
    """Distance-softmax aggregation of cross-view neighbor RGB features.

    rgb_tokens/anchors: (V, N, d) and (V, N, 3); neighbor_idx: (V, N, K) flat
    indices. Distances are recomputed in torch (same float32 expression as
    selection) so gradients flow through anchors and neighbor features.
    """
    num_views, n_tok, d = rgb_tokens.shape
    if neighbor_idx.shape[-1] == 0:
        h = torch.zeros_like(rgb_tokens)
        return (h, None) if return_alpha else h
    flat_anchor = anchors.reshape(-1, 3)
    flat_rgb = rgb_tokens.reshape(-1, d)
    nb_anchor = flat_anchor[neighbor_idx]            # (V, N, K, 3)
    diff = anchors[:, :, None, :] - nb_anchor
    delta = torch.sqrt(torch.clamp((diff * diff).sum(-1), min=DELTA_SQ_FLOOR))
    alpha = torch.softmax(-delta / tau, dim=-1)      # (V, N, K)
    h = (alpha[..., None] * flat_rgb[neighbor_idx]).sum(dim=-2)
    return (h, alpha) if return_alpha else h


class GeometryFusion(nn.Module):
    """The full perception stack, shared across views and batch elements."""

    def __init__(self, enc: EncoderConfig, fus: FusionConfig):
        super().__init__()
        self.cfg = fus
        self.token_dim = enc.token_dim
        self.depth_dim = enc.depth_dim
        self.d_max = fus.d_max
        self.rgb_encoder = PyramidEncoder(3, enc.rgb_base_channels, enc.token_dim)
        self.depth_encoder = PyramidEncoder(1, enc.depth_base_channels, enc.depth_dim)
        self.pair = PairFusion(enc.token_dim, enc.depth_dim, fus.pair_heads, fus.pair_ffn)
        self.depth_head = DepthHead(enc.depth_dim, fus.num_bins)
        self.phi = PointEmbed(enc.token_dim, fus.phi_hidden)
        self.gate = nn.Parameter(torch.tensor(float(fus.gate_init)))
        preserve_init(self.gate)
        self.fuse_mlp = MLP([2 * enc.token_dim + enc.depth_dim, enc.token_dim,
                             enc.token_dim])

    def encode_views(self, rgb: torch.Tensor, depth: torch.Tensor, grids):
        """rgb: (B, V, 3, H, W) in [0,1]; depth: (B, V, 1, H, W) meters.

        Returns RGB tokens (B, V, N, d) and depth tokens (B, V, N, d_dep).
        """
        if rgb.shape[-2:] != depth.shape[-2:]:
            raise ValueError("RGB and depth extents differ")
        b, v = rgb.shape[:2]
        rgb_lv = self.rgb_encoder(rgb.reshape(b * v, *rgb.shape[2:]), grids)
        dep_lv = self.depth_encoder(depth.reshape(b * v, *depth.shape[2:]) / self.d_max,
                                    grids)
        rgb_tok = flatten_pyramid(rgb_lv).reshape(b, v, -1, self.token_dim)
        dep_tok = flatten_pyramid(dep_lv).reshape(b, v, -1, self.depth_dim)
        return rgb_tok, dep_tok

    def forward(self, rgb: torch.Tensor, depth: torch.Tensor, geo: TorchGeometry,
                *, pair_fusion: bool = True, aggregation: bool = True,
                neighbor_idx=None):
        """Full pass. rgb: (B, V, 3, H, W); depth: (B, V, 1, H, W).

        Returns a dict with fused tokens (B, V, N, d), anchors (B, V, N, 3),
        depth distributions (B, V, N, bins), and the neighbor indices used.
        """
        rgb_tok, dep_tok = self.encode_views(rgb, depth, geo.grids)
        return self.fuse_tokens(rgb_tok, dep_tok, geo, pair_fusion=pair_fusion,
                                aggregation=aggregation, neighbor_idx=neighbor_idx)

    def fuse_tokens(self, rgb_tok: torch.Tensor, dep_tok: torch.Tensor,
                    geo: TorchGeometry, *, pair_fusion: bool = True,
                    aggregation: bool = True, neighbor_idx=None):
        batch = rgb_tok.shape[0]
        r_hat, d_hat = self.pair(rgb_tok, dep_tok, fuse=pair_fusion)
        probs = self.depth_head(r_hat, d_hat)                  # (B, V, N, bins)
        anchors, embeds = lift(probs, self.phi, geo)
        if aggregation and geo.num_views > 1:
            if neighbor_idx is None:
                det = anchors.detach().to(torch.float32).numpy()
                neighbor_idx = torch.from_numpy(
                    np.stack([select_neighbors(det[i], self.cfg.knn_k)
                              for i in range(batch)]))
            h = torch.stack([
                aggregate(rgb_tok[i], anchors[i], neighbor_idx[i], self.cfg.tau)
                for i in range(batch)])
            enhanced = rgb_tok + self.gate * h
        else:
            neighbor_idx = None
            enhanced = rgb_tok
        fused = self.fuse_mlp(torch.cat([enhanced, dep_tok, embeds], dim=-1))
        return {
            "tokens": fused, "anchors": anchors, "probs": probs,
            "rgb_tokens": rgb_tok, "depth_tokens": dep_tok,
            "neighbor_idx": neighbor_idx,
        }


def expected_depth(probs: torch.Tensor, depths: torch.Tensor) -> torch.Tensor:
    """Per-token expected depth under the bin distribution."""
    return probs @ depths

"""Joint-centric state encoding and the diffusion action decoder.

State tokens: per-joint MLP on the 8-vector plus two self-attention blocks
whose logits receive a learned additive bias indexed by link-hop distance
(hop counts past the last bucket share it).

Decoder: the noisy trajectory is embedded per (step, joint), average-pooled
to the base chunk length H/c, conditioned on state tokens and the sinusoidal
timestep embedding, then refined by 6 blocks — graph-biased joint
self-attention, rotary temporal attention, cross-attention to
geometry-enhanced multi-view tokens (anchor-coded keys), cross-attention to
the language context, FFN. A coarse-to-fine head upsamples the base chunk
x2 per stage with kernel-3 convolutions to the full horizon; the final
convolution starts at zero, so the initial output is the head bias,
independent of all conditioning.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import DecoderConfig
from .layers import MLP, Attention, ResidualAttention, ResidualFFN, sinusoidal_embedding
from .numcore import preserve_init


class GraphBias(nn.Module):
    """Additive attention-logit bias: one learned scalar per hop-count bucket."""

    def __init__(self, buckets: int):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(buckets))

    def forward(self, hop_buckets: torch.Tensor) -> torch.Tensor:
        return self.bias[hop_buckets]  # (N_j, N_j)


def hop_buckets(graph: np.ndarray, buckets: int) -> torch.Tensor:
    return torch.from_numpy(np.minimum(graph, buckets - 1).astype(np.int64))


class StateEncoder(nn.Module):
    """Joint states (..., N_j, 8) -> state tokens (..., N_j, d)."""

    def __init__(self, dim: int, heads: int, buckets: int, blocks: int = 2):
        super().__init__()
        self.embed = MLP([8, dim, dim])
        self.graph_bias = nn.ModuleList(GraphBias(buckets) for _ in range(blocks))
        self.attn = nn.ModuleList(ResidualAttention(dim, heads) for _ in range(blocks))
        self.ffn = nn.ModuleList(ResidualFFN(dim) for _ in range(blocks))

    def forward(self, joint_state: torch.Tensor, hop: torch.Tensor,
                return_weights: bool = False):
        x = self.embed(joint_state)
        weights = []
        for gb, attn, ffn in zip(self.graph_bias, self.attn, self.ffn):
            out = attn(x, bias=gb(hop), return_weights=return_weights)
            if return_weights:
                x, w = out
                weights.append(w)
            else:
                x = out
            x = ffn(x)
        return (x, weights) if return_weights else x


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DecoderConfig, dim: int, context: bool = True):
        super().__init__()
        self.graph_bias = GraphBias(cfg.graph_bias_buckets)
        self.joint_attn = ResidualAttention(dim, cfg.heads)
        self.temporal_attn = ResidualAttention(dim, cfg.heads,
                                               rope_max_pos=cfg.max_pos_temporal)
        self.geom_attn = ResidualAttention(dim, cfg.heads,
                                           rope_max_pos=cfg.max_pos_img, norm_kv=True)
        self.ctx_attn = ResidualAttention(dim, cfg.heads,
                                          rope_max_pos=cfg.max_pos_text,
                                          norm_kv=True) if context else None
        self.ffn = ResidualFFN(dim)

    def forward(self, x, hop, geom_kv, geom_key_bias, geom_pos, ctx_kv,
                base_pos, flat_pos):
        b, base, nj, d = x.shape
        # Joint self-attention within each base step, graph-biased logits.
        x = self.joint_attn(x.reshape(b * base, nj, d),
                            bias=self.graph_bias(hop)).reshape(b, base, nj, d)
        # Temporal attention per joint across base steps (rotary positions).
        xt = x.transpose(1, 2).reshape(b * nj, base, d)
        xt = self.temporal_attn(xt, q_pos=base_pos, k_pos=base_pos)
        x = xt.reshape(b, nj, base, d).transpose(1, 2)
        # Cross-attention to geometry tokens (anchor-coded keys) and context.
        xf = x.reshape(b, base * nj, d)
        xf = self.geom_attn(xf, kv=geom_kv, key_bias=geom_key_bias,
                            q_pos=flat_pos, k_pos=geom_pos)
        if self.ctx_attn is not None and ctx_kv is not None:
            ctx_pos = torch.arange(ctx_kv.shape[1])
            xf = self.ctx_attn(xf, kv=ctx_kv, q_pos=flat_pos, k_pos=ctx_pos)
        xf = self.ffn(xf)
        return xf.reshape(b, base, nj, d)


class UpsampleHead(nn.Module):
    """Base chunk (B, base, N_j, d) -> (B, H, N_j, 8) via x2 stages.

    Channels run d -> d/2 -> d/4 -> 8 with kernel-3 convolutions after
    nearest-neighbor doubling; the final convolution is zero-initialized.
    """

    def __init__(self, dim: int, stages: int = 3, out_channels: int = 8):
        super().__init__()
        convs = []
        ch = dim
        for s in range(stages):
            out = out_channels if s == stages - 1 else ch // 2
            convs.append(nn.Conv1d(ch, out, kernel_size=3, padding=1))
            ch = out
        self.convs = nn.ModuleList(convs)
        self.act = nn.GELU()
        last = self.convs[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        preserve_init(last.weight)
        preserve_init(last.bias)

    def forward(self, x: torch.Tensor, collect_stages: bool = False):
        b, base, nj, d = x.shape
        seq = x.permute(0, 2, 3, 1).reshape(b * nj, d, base)
        stages = []
        for i, conv in enumerate(self.convs):
            seq = torch.repeat_interleave(seq, 2, dim=-1)
            seq = conv(seq)
            if i < len(self.convs) - 1:
                seq = self.act(seq)
            stages.append(seq.shape[-1])
        out = seq.reshape(b, nj, seq.shape[1], seq.shape[2]).permute(0, 3, 1, 2)
        return (out, stages) if collect_stages else out


class ActionDecoder(nn.Module):
    """Denoiser: predicts the clean action chunk from the noisy one."""

    def __init__(self, cfg: DecoderConfig, dim: int, context: bool = True):
        super().__init__()
        self.cfg = cfg
        self.input_embed = MLP([8, dim, dim])
        self.state_proj = nn.Linear(dim, dim)
        self.time_mlp = MLP([cfg.time_embed_dim, dim, dim])
        self.anchor_embed = MLP([3, dim, dim])
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg, dim, context=context) for _ in range(cfg.num_blocks))
        self.head = UpsampleHead(dim, stages=_stages(cfg.upsample_factor))

    def forward(self, noisy: torch.Tensor, t: torch.Tensor, state_tokens: torch.Tensor,
                hop: torch.Tensor, geom_tokens: torch.Tensor, geom_anchors: torch.Tensor,
                geom_pos: torch.Tensor, context: torch.Tensor):
        """noisy: (B, H, N_j, 8); t: (B,); state_tokens: (B, N_j, d);
        geom_tokens/anchors: (B, Ng, d)/(B, Ng, 3); geom_pos: (Ng,) int;
        context: (B, Ls, d) or None. Returns the clean-sample prediction
        (B, H, N_j, 8).
        """
        b, horizon, nj, _ = noisy.shape
        cfg = self.cfg
        if horizon != cfg.horizon:
            raise ValueError(f"trajectory horizon {horizon} != configured {cfg.horizon}")
        base = cfg.base_len
        x = self.input_embed(noisy)
        x = x.reshape(b, base, cfg.upsample_factor, nj, -1).mean(dim=2)
        t_emb = sinusoidal_embedding(t.to(torch.float32), cfg.time_embed_dim,
                                     dtype=x.dtype)
        x = x + self.state_proj(state_tokens)[:, None]
        x = x + self.time_mlp(t_emb)[:, None, None, :]
        key_bias = self.anchor_embed(geom_anchors)
        base_pos = torch.arange(base)
        flat_pos = base_pos.repeat_interleave(nj)
        for block in self.blocks:
            x = block(x, hop, geom_tokens, key_bias, geom_pos, context,
                      base_pos, flat_pos)
        return self.head(x)


def _stages(upsample_factor: int) -> int:
    stages = int(round(np.log2(upsample_factor)))
    if 2 ** stages != upsample_factor:
        raise ValueError("upsample factor must be a power of two")
    return stages

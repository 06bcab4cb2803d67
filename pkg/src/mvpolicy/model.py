"""The full policy: geometry-guided perception, language readout, joint-state
encoding, and the diffusion action decoder, assembled behind one module.

Construction is deterministic: `build_model` derives token geometry from the
rig + camera settings, instantiates every sub-module, and reinitializes all
parameters from a seeded stream in sorted-name order, so two builds from the
same config and seed are bitwise identical.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import camgeom, diffusion
from .config import RunConfig
from .decoder import ActionDecoder, StateEncoder, hop_buckets
from .kinematics import KinematicChain, TorchChain, link_hop_distances
from .langread import LanguageReadout, toy_text_embed
from .mvfusion import GeometryFusion, TorchGeometry, torch_geometry
from .numcore import Rng, init_parameters


class PolicyModel(nn.Module):
    def __init__(self, cfg: RunConfig, chain: KinematicChain,
                 geometry: camgeom.TokenGeometry):
        super().__init__()
        self.cfg = cfg
        self.chain = chain
        self.torch_chain = TorchChain(chain, dtype=torch.float32)
        self.geometry: TorchGeometry = torch_geometry(geometry)
        self.schedule = diffusion.make_schedule(cfg.decoder.timesteps)

        dim = cfg.encoder.token_dim
        self.fusion = GeometryFusion(cfg.encoder, cfg.fusion)
        self.use_language = not cfg.ablation.disable_language
        self.readout = (LanguageReadout(cfg.readout, out_dim=dim)
                        if self.use_language else None)
        self.state_encoder = StateEncoder(dim, cfg.decoder.heads,
                                          cfg.decoder.graph_bias_buckets,
                                          cfg.decoder.state_blocks)
        self.decoder = ActionDecoder(cfg.decoder, dim, context=self.use_language)

        hop = hop_buckets(link_hop_distances(chain), cfg.decoder.graph_bias_buckets)
        self.register_buffer("hop", hop, persistent=False)

        levels = tuple(cfg.decoder.geometry_levels)
        n_levels = len(self.geometry.grids)
        if any(l < 0 or l >= n_levels for l in levels) or not levels:
            raise ValueError(f"geometry levels {levels} outside 0..{n_levels - 1}")
        sel = torch.nonzero(
            torch.isin(self.geometry.level_ids,
                       torch.tensor(levels, dtype=torch.int64))).squeeze(-1)
        self.register_buffer("geom_sel", sel, persistent=False)
        self.register_buffer("geom_pos",
                             self.geometry.level_ids[sel].repeat(len(geometry.origins)),
                             persistent=False)

    # ---------------------------------------------------------------- text
    def embed_text(self, instructions) -> tuple:
        """List of strings -> (tokens (B, K, D_c), mask (B, K))."""
        cfg = self.cfg.readout
        toks, masks = [], []
        for text in instructions:
            tt = toy_text_embed(text, cfg.context_dim, cfg.text_tokens)
            toks.append(torch.from_numpy(tt.tokens))
            masks.append(torch.from_numpy(tt.mask))
        dtype = next(self.parameters()).dtype
        return torch.stack(toks).to(dtype), torch.stack(masks)

    # ---------------------------------------------------------- perception
    def perceive(self, rgb: torch.Tensor, depth: torch.Tensor, text_tokens,
                 text_mask, *, neighbor_idx=None) -> dict:
        """State-independent perception over a batch of observations.

        rgb: (B, V, 3, H, W) in [0, 1]; depth: (B, V, 1, H, W) meters with 0
        marking invalid pixels; text_tokens/text_mask: (B, K, D_c)/(B, K) or
        None when language is disabled.
        """
        geo = self._geo(rgb.dtype)
        if rgb.shape[1] != geo.num_views:
            raise ValueError(f"observation has {rgb.shape[1]} views, rig has "
                             f"{geo.num_views}")
        abl = self.cfg.ablation
        out = self.fusion(rgb, depth, geo,
                          pair_fusion=not abl.disable_pair_fusion,
                          aggregation=not abl.disable_aggregation,
                          neighbor_idx=neighbor_idx)
        if self.use_language:
            if text_tokens is None:
                raise ValueError("language conditioning enabled but no text given")
            patches = self.readout.patch_embed(rgb)
            out["context"] = self.readout(text_tokens, text_mask, patches)
        else:
            out["context"] = None
        b, v = out["tokens"].shape[:2]
        dim = out["tokens"].shape[-1]
        out["geom_tokens"] = out["tokens"][:, :, self.geom_sel].reshape(b, -1, dim)
        out["geom_anchors"] = out["anchors"][:, :, self.geom_sel].reshape(b, -1, 3)
        return out

    def condition(self, perception: dict, state: torch.Tensor) -> dict:
        """Attach joint-state tokens (B, N_j, 8 -> tokens) to a perception dict."""
        out = dict(perception)
        out["state_tokens"] = self.state_encoder(state, self.hop)
        return out

    def observe(self, rgb: torch.Tensor, depth: torch.Tensor, text_tokens,
                text_mask, state: torch.Tensor, *, neighbor_idx=None) -> dict:
        """Full conditioning pass: perception plus the current joint state."""
        perception = self.perceive(rgb, depth, text_tokens, text_mask,
                                   neighbor_idx=neighbor_idx)
        return self.condition(perception, state)

    @staticmethod
    def expand_perception(perception: dict, index: torch.Tensor) -> dict:
        """Row-gather a perception dict along the batch dim (dedup expansion)."""
        out = {}
        for key, val in perception.items():
            out[key] = val[index] if isinstance(val, torch.Tensor) else val
        return out

    # ------------------------------------------------------------ denoising
    def denoise(self, noisy_angles: torch.Tensor, t: torch.Tensor, obs: dict,
                ) -> torch.Tensor:
        """Clean-trajectory prediction (B, H, N_j, 8) from noisy angles.

        The noisy joint state fed to the decoder is rebuilt via FK so the pose
        channels stay consistent with the diffused angles.
        """
        noisy_state = self.torch_chain.joint_state(noisy_angles)
        return self.decoder(noisy_state, t, obs["state_tokens"], self.hop,
                            obs["geom_tokens"], obs["geom_anchors"],
                            self.geom_pos, obs["context"])

    def sample_actions(self, obs: dict, rng: Rng, steps: int = None) -> torch.Tensor:
        """Full reverse process -> trajectory (B, H, N_j, 8), FK-consistent."""
        cfg = self.cfg.decoder
        steps = cfg.sample_steps if steps is None else steps
        batch = obs["state_tokens"].shape[0]
        shape = (batch, cfg.horizon, self.chain.n_joints)
        dtype = next(self.parameters()).dtype

        def fn(x, t):
            tt = torch.full((batch,), t, dtype=torch.int64)
            return self.denoise(x, tt, obs)[..., 0]

        with torch.no_grad():
            angles = diffusion.sample(fn, shape, self.schedule, steps, rng, dtype)
            return self.torch_chain.joint_state(angles)

    # ------------------------------------------------------------- plumbing
    def _geo(self, dtype: torch.dtype) -> TorchGeometry:
        if self.geometry.origins.dtype != dtype:
            self.geometry = self.geometry.to(dtype)
        return self.geometry

    def param_groups(self) -> list:
        """Two optimizer groups: RGB encoder (scaled lr) and everything else."""
        rgb = [p for n, p in sorted(self.named_parameters())
               if n.startswith("fusion.rgb_encoder.")]
        rest = [p for n, p in sorted(self.named_parameters())
                if not n.startswith("fusion.rgb_encoder.")]
        scale = self.cfg.optim.rgb_lr_scale
        return [{"params": rest, "lr_scale": 1.0},
                {"params": rgb, "lr_scale": scale}]

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def to_dtype(self, dtype: torch.dtype) -> "PolicyModel":
        """Cast parameters, FK constants, and geometry (for gradient checks)."""
        self.to(dtype)
        self.torch_chain = TorchChain(self.chain, dtype=dtype)
        self.geometry = self.geometry.to(dtype)
        return self


def default_bin_spec(cfg: RunConfig) -> camgeom.DepthBinSpec:
    return camgeom.DepthBinSpec(cfg.fusion.num_bins, cfg.fusion.d_min,
                                cfg.fusion.d_max)


def build_model(cfg: RunConfig, chain: KinematicChain, rig: camgeom.Rig,
                ) -> PolicyModel:
    """Construct + deterministically initialize the policy for a rig/chain."""
    views = tuple(cfg.ablation.views)
    sub = rig.subset(views)
    if sub.names != views:
        missing = set(views) - set(sub.names)
        if missing:
            raise ValueError(f"rig is missing requested views: {sorted(missing)}")
        raise ValueError(f"ablation views {views} must follow the rig's "
                         f"camera order {sub.names}")
    geometry = camgeom.build_token_geometry(
        sub, cfg.camera.width, cfg.camera.height, default_bin_spec(cfg),
        cfg.camera.strides)
    model = PolicyModel(cfg, chain, geometry)
    init_parameters(model, Rng(np.random.SeedSequence([cfg.seed, 0x10DE1])))
    return model

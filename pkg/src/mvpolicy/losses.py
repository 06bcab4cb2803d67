"""Training losses: weighted diffusion reconstruction on full joint states,
a forward-kinematics consistency term on the predicted angles, and a
depth-distillation term supervising per-token depth distributions against
teacher depth pooled into soft two-hot bin targets.
"""

from __future__ import annotations

import numpy as np
import torch

from . import diffusion
from .camgeom import DepthBinSpec, bin_centers
from .config import LossConfig
from .kinematics import TorchChain, canonicalize_sign
from .numcore import Rng

PROB_CLAMP = 1e-6


def diff_weights(cfg: LossConfig, dtype=torch.float32) -> torch.Tensor:
    """Per-channel weights over [angle, position(3), quaternion(4)]."""
    return torch.tensor([cfg.angle_weight] + [cfg.position_weight] * 3
                        + [cfg.quat_weight] * 4, dtype=dtype)


def fk_weights(cfg: LossConfig, dtype=torch.float32) -> torch.Tensor:
    """Per-channel weights over [position(3), quaternion(4)]."""
    return torch.tensor([cfg.position_weight] * 3 + [cfg.quat_weight] * 4,
                        dtype=dtype)


def loss_diffusion(pred: torch.Tensor, target: torch.Tensor,
                   weights: torch.Tensor) -> torch.Tensor:
    """Channel-weighted squared error, summed over channels, mean elsewhere.

    pred/target: (B, H, N_j, 8).
    """
    return ((pred - target) ** 2 * weights).sum(dim=-1).mean()


def loss_fk(chain: TorchChain, pred: torch.Tensor, target: torch.Tensor,
            weights: torch.Tensor) -> torch.Tensor:
    """FK-consistency: poses recomputed from predicted angles vs. target poses.

    Both quaternions are sign-canonicalized (w >= 0) before comparison so the
    double cover cannot manufacture error.
    """
    p_hat, q_hat = chain.fk(pred[..., 0])
    err = torch.cat([p_hat - target[..., 1:4],
                     canonicalize_sign(q_hat) - canonicalize_sign(target[..., 4:8])],
                    dim=-1)
    return (err ** 2 * weights).sum(dim=-1).mean()


def soft_bin_pixels(depth: np.ndarray, spec: DepthBinSpec):
    """Per-pixel soft two-hot bin assignment.

    Depths between adjacent bin centers split their mass linearly; depths
    outside the center range collapse to one-hot on the boundary bin.
    Returns (lo_bin int64, lo_weight float64): mass lo_weight on lo_bin and
    1 - lo_weight on lo_bin + 1 (zero when lo_weight is 1 at the top edge).
    """
    centers = bin_centers(spec)
    x = (depth - centers[0]) / spec.bin_width
    x = np.clip(x, 0.0, spec.num_bins - 1.0)
    lo = np.minimum(np.floor(x).astype(np.int64), spec.num_bins - 2)
    return lo, 1.0 - (x - lo)


def depth_targets(teacher: np.ndarray, valid: np.ndarray, spec: DepthBinSpec,
                  grids, strides, mode: str = "fraction",
                  threshold: float = 0.5):
    """Pool per-pixel soft two-hot targets into per-token distributions.

    teacher: (V, H, W) teacher depth in meters; valid: (V, H, W) bool, where
    the *raw sensor* depth is valid (teacher values at invalid pixels are
    ignored). Tokens average the two-hot vectors of their window's valid
    pixels; windows with no valid pixel get a uniform target and zero weight.

    Returns (targets (V, N, num_bins) float32, omega (V, N) float32) with
    tokens ordered finest level first, row-major, matching the token layout.
    omega is the window's valid fraction (zeroed below `threshold`), or a
    0/1 indicator of that test in "binary" mode.
    """
    if mode not in ("fraction", "binary"):
        raise ValueError(f"unknown validity mode {mode!r}")
    num_views = teacher.shape[0]
    lo, w_lo = soft_bin_pixels(teacher, spec)
    hi = np.minimum(lo + 1, spec.num_bins - 1)
    tgt_per_level, omega_per_level = [], []
    for stride, (gh, gw) in zip(strides, grids):
        ph, pw = gh * stride, gw * stride
        v_idx = np.broadcast_to(np.arange(num_views)[:, None, None],
                                (num_views, ph, pw))
        rows = np.broadcast_to(np.arange(ph)[None, :, None], (num_views, ph, pw))
        cols = np.broadcast_to(np.arange(pw)[None, None, :], (num_views, ph, pw))
        tok = (rows // stride) * gw + (cols // stride)
        ok = valid[:, :ph, :pw]
        acc = np.zeros((num_views, gh * gw, spec.num_bins))
        cnt = np.zeros((num_views, gh * gw))
        sel = (v_idx[ok], tok[ok])
        np.add.at(acc, (*sel, lo[:, :ph, :pw][ok]), w_lo[:, :ph, :pw][ok])
        np.add.at(acc, (*sel, hi[:, :ph, :pw][ok]), 1.0 - w_lo[:, :ph, :pw][ok])
        np.add.at(cnt, sel, 1.0)
        frac = cnt / (stride * stride)
        empty = cnt == 0
        acc[empty] = 1.0 / spec.num_bins
        acc[~empty] /= cnt[~empty][:, None]
        passed = frac >= threshold
        omega = np.where(passed, frac if mode == "fraction" else 1.0, 0.0)
        tgt_per_level.append(acc)
        omega_per_level.append(omega)
    targets = np.concatenate(tgt_per_level, axis=1).astype(np.float32)
    return targets, np.concatenate(omega_per_level, axis=1).astype(np.float32)


def loss_depth(probs: torch.Tensor, targets: torch.Tensor,
               omega: torch.Tensor) -> torch.Tensor:
    """Token-weighted binary cross-entropy over depth bins.

    probs: (B, V, N, bins) predicted distributions; targets likewise; omega:
    (B, V, N). Per token, BCE is averaged over bins; tokens are weighted by
    omega and normalized by the fixed token count V*N (not by the weight sum),
    then averaged over the batch.
    """
    p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = -(targets * torch.log(p) + (1.0 - targets) * torch.log1p(-p))
    per_token = bce.mean(dim=-1)
    v, n = per_token.shape[-2], per_token.shape[-1]
    return (omega * per_token).sum(dim=(-1, -2)).mean() / (v * n)


def augment_conditioning(angles: torch.Tensor, rng: Rng, cfg: LossConfig,
                         gripper_mask: np.ndarray) -> torch.Tensor:
    """Uniform angle jitter on non-gripper joints of the conditioning state."""
    if cfg.augment_noise == 0.0:
        return angles
    jitter = rng.torch_uniform(-cfg.augment_noise, cfg.augment_noise,
                               angles.shape, dtype=angles.dtype)
    keep = torch.from_numpy(~gripper_mask).to(angles.dtype)
    return angles + jitter * keep


def total_loss(model, obs: dict, clean_angles: torch.Tensor, t: torch.Tensor,
               noise: torch.Tensor, depth_tgt=None, depth_omega=None):
    """Composite training objective for one batch.

    obs: the model's conditioning dict (built inside the gradient graph);
    clean_angles: (B, H, N_j) ground-truth action chunk; t: (B,) timesteps;
    noise: (B, H, N_j) standard normal draws. Returns (loss, parts).
    """
    cfg = model.cfg.loss
    dtype = clean_angles.dtype
    noisy = diffusion.ddpm_forward(clean_angles, t, noise, model.schedule)
    pred = model.denoise(noisy, t, obs)
    target = model.torch_chain.joint_state(clean_angles)
    l_diff = loss_diffusion(pred, target, diff_weights(cfg, dtype))
    l_fk = loss_fk(model.torch_chain, pred, target, fk_weights(cfg, dtype))
    parts = {"diff": l_diff, "fk": l_fk}
    loss = l_diff + cfg.lambda_fk * l_fk
    use_depth = (depth_tgt is not None
                 and not model.cfg.ablation.disable_depth_loss)
    if use_depth:
        l_dep = loss_depth(obs["probs"], depth_tgt, depth_omega)
        parts["depth"] = l_dep
        loss = loss + cfg.lambda_depth * l_dep
    else:
        parts["depth"] = torch.zeros((), dtype=dtype)
    parts["total"] = loss
    return loss, parts

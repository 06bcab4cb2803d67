"""Training loop: deterministic batch assembly, the composite objective, and
the warmup/milestone learning-rate shape.

Scenes are static, so perception dominates the step cost. Batches therefore
deduplicate (episode, frame) pairs: the perception front-end runs once per
unique frame and its rows are gathered back out to batch elements, while the
conditioning state, action chunk, timestep, and noise stay per-element.

Every step draws from a counter-based stream seeded by (seed, tag, step), so
two runs with the same seed produce bit-identical loss curves and a resumed
run continues exactly where an uninterrupted one would be.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from . import losses
from .camgeom import bin_centers
from .checkpoint import load_checkpoint, save_checkpoint
from .config import OptimConfig, RunConfig
from .dataio import LoadedEpisode, MetricsWriter
from .model import PolicyModel, default_bin_spec
from .numcore import Rng

_STEP_TAG = 0x57E9  # per-step stream: (seed, tag, step)


class NumericalAbort(RuntimeError):
    """A non-finite loss or gradient; carries the offending batch so the
    failure is reproducible from the log line alone."""

    def __init__(self, step: int, episode_ids, detail: str):
        self.step = int(step)
        self.episode_ids = tuple(int(i) for i in episode_ids)
        self.detail = detail
        super().__init__(f"non-finite {detail} at step {self.step} "
                         f"(episode ids {list(self.episode_ids)})")


def lr_factor(cfg: OptimConfig, step: int) -> float:
    """Linear warmup from warmup_start_factor, then a single decay milestone."""
    if step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        factor = cfg.warmup_start_factor + (1.0 - cfg.warmup_start_factor) * frac
    else:
        factor = 1.0
    if step >= cfg.decay_milestone * cfg.max_step:
        factor *= cfg.decay_factor
    return factor


@dataclass
class PreparedEpisode:
    """One episode with tensors and per-frame teacher targets precomputed."""

    instruction: str
    angles: torch.Tensor        # (T, N_j) float32
    rgb: torch.Tensor           # (U, V, 3, H, W) float32 in [0, 1]
    depth: torch.Tensor         # (U, V, 1, H, W) float32, 0 = invalid
    frame_of_step: np.ndarray   # (T,) int64
    text_tokens: torch.Tensor   # (K, D_c) or None when language is disabled
    text_mask: torch.Tensor     # (K,) or None
    depth_tgt: torch.Tensor     # (U, V, N, bins) or None (no teacher)
    depth_omega: torch.Tensor   # (U, V, N) or None

    @property
    def length(self) -> int:
        return self.angles.shape[0]


def prepare_episode(model: PolicyModel, ep: LoadedEpisode) -> PreparedEpisode:
    cfg = model.cfg
    geo = model.geometry
    if ep.num_views != geo.num_views:
        raise ValueError(f"episode has {ep.num_views} views, model expects "
                         f"{geo.num_views}")
    h, w = ep.rgb.shape[2], ep.rgb.shape[3]
    if (w, h) != (cfg.camera.width, cfg.camera.height):
        raise ValueError(f"episode frames are {w}x{h}, config says "
                         f"{cfg.camera.width}x{cfg.camera.height}")
    if ep.num_bins != cfg.fusion.num_bins:
        raise ValueError(f"episode was binned with {ep.num_bins} bins, config "
                         f"says {cfg.fusion.num_bins}")
    if ep.angles.shape[1] != model.chain.n_joints:
        raise ValueError(f"episode has {ep.angles.shape[1]} joints, chain has "
                         f"{model.chain.n_joints}")

    rgb = torch.from_numpy(ep.rgb.astype(np.float32) / 255.0).permute(0, 1, 4, 2, 3)
    depth = torch.from_numpy(ep.raw_depth[:, :, None])

    text_tokens = text_mask = None
    if model.use_language:
        toks, mask = model.embed_text([ep.instruction])
        text_tokens, text_mask = toks[0], mask[0]

    depth_tgt = depth_omega = None
    if ep.teacher_depth is not None:
        spec = default_bin_spec(cfg)
        grids = [tuple(g) for g in geo.grids]
        tgt, omega = [], []
        for u in range(ep.rgb.shape[0]):
            t, o = losses.depth_targets(
                ep.teacher_depth[u], ep.raw_depth[u] > 0.0, spec, grids,
                cfg.camera.strides, mode=cfg.loss.validity_mode,
                threshold=cfg.loss.valid_threshold)
            tgt.append(t)
            omega.append(o)
        depth_tgt = torch.from_numpy(np.stack(tgt))
        depth_omega = torch.from_numpy(np.stack(omega))

    return PreparedEpisode(
        instruction=ep.instruction,
        angles=torch.from_numpy(ep.angles.astype(np.float32)),
        rgb=rgb.contiguous(), depth=depth, frame_of_step=ep.frame_of_step,
        text_tokens=text_tokens, text_mask=text_mask,
        depth_tgt=depth_tgt, depth_omega=depth_omega)


class Trainer:
    """Drives optimization of a PolicyModel over a loaded dataset.

    perception_only=True restricts training to the fusion front-end with the
    depth-distillation term alone (used to probe the perception stack without
    paying for the decoder).
    """

    def __init__(self, cfg: RunConfig, model: PolicyModel, episodes,
                 out_dir, run_hash: str, *, perception_only: bool = False,
                 resume_from=None):
        if not episodes:
            raise ValueError("no training episodes")
        self.cfg = cfg
        self.model = model
        self.out_dir = str(out_dir)
        self.run_hash = run_hash
        self.perception_only = perception_only
        os.makedirs(self.out_dir, exist_ok=True)

        self.prepared = [prepare_episode(model, ep) for ep in episodes]
        horizon = cfg.decoder.horizon
        if not perception_only:
            for i, ep in enumerate(self.prepared):
                if ep.length < horizon:
                    raise ValueError(f"episode {i} has {ep.length} steps, "
                                     f"shorter than the horizon {horizon}")
        if perception_only:
            if cfg.ablation.disable_depth_loss:
                raise ValueError("perception-only training needs the depth loss")
            if any(ep.depth_tgt is None for ep in self.prepared):
                raise ValueError("perception-only training needs teacher depth")

        self.optimizer = torch.optim.AdamW(
            self._param_groups(), lr=cfg.optim.lr,
            weight_decay=cfg.optim.weight_decay)
        self.gripper_mask = model.chain.gripper_mask

        self.step = 0
        if resume_from is not None:
            self.step = load_checkpoint(resume_from, model, self.optimizer,
                                        expected_run_hash=run_hash)
        self.metrics = MetricsWriter(os.path.join(self.out_dir, "metrics.csv"),
                                     resume=resume_from is not None)

    # ------------------------------------------------------------- plumbing
    def _param_groups(self) -> list:
        if not self.perception_only:
            return self.model.param_groups()
        scale = self.cfg.optim.rgb_lr_scale
        named = sorted(self.model.fusion.named_parameters())
        rgb = [p for n, p in named if n.startswith("rgb_encoder.")]
        rest = [p for n, p in named if not n.startswith("rgb_encoder.")]
        return [{"params": rest, "lr_scale": 1.0},
                {"params": rgb, "lr_scale": scale}]

    def _apply_lr(self, step: int) -> float:
        factor = lr_factor(self.cfg.optim, step)
        base = self.cfg.optim.lr * factor
        for group in self.optimizer.param_groups:
            group["lr"] = base * group["lr_scale"]
        return base

    def _grad_norm(self) -> float:
        total = 0.0
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                if p.grad is not None:
                    total += float(p.grad.detach().pow(2).sum())
        return total ** 0.5

    def _step_rng(self, step: int) -> Rng:
        return Rng(np.random.SeedSequence([self.cfg.seed, _STEP_TAG, step]))

    def _gather_frames(self, ep_idx, starts):
        """Deduplicate (episode, frame) pairs across the batch.

        Returns (unique keys, index map (B,) into the unique axis).
        """
        order, inverse = {}, []
        for i, s in zip(ep_idx, starts):
            key = (int(i), int(self.prepared[i].frame_of_step[s]))
            if key not in order:
                order[key] = len(order)
            inverse.append(order[key])
        keys = list(order)
        return keys, torch.tensor(inverse, dtype=torch.int64)

    # ----------------------------------------------------------- one batch
    def train_step(self) -> dict:
        step = self.step
        rng = self._step_rng(step)
        parts = (self._perception_loss(rng) if self.perception_only
                 else self._policy_loss(rng))
        loss = parts["total"]
        ep_ids = parts.pop("_episodes")
        if not torch.isfinite(loss):
            raise NumericalAbort(step, ep_ids, "loss")

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = self._grad_norm()
        if not np.isfinite(grad_norm):
            raise NumericalAbort(step, ep_ids, "gradient")
        lr = self._apply_lr(step)
        self.optimizer.step()
        out = {k: float(v.detach() if isinstance(v, torch.Tensor) else v)
               for k, v in parts.items()}
        out["lr"] = lr
        out["grad_norm"] = grad_norm
        return out

    def _policy_loss(self, rng: Rng) -> dict:
        cfg = self.cfg
        bs, horizon = cfg.optim.batch_size, cfg.decoder.horizon
        ep_idx = rng.integers(0, len(self.prepared), size=bs)
        starts = np.array([rng.integers(0, self.prepared[i].length - horizon + 1)
                           for i in ep_idx], dtype=np.int64)
        t = torch.from_numpy(rng.integers(1, cfg.decoder.timesteps + 1, size=bs))

        cond = torch.stack([self.prepared[i].angles[s]
                            for i, s in zip(ep_idx, starts)])
        cond = losses.augment_conditioning(cond, rng, cfg.loss, self.gripper_mask)
        noise = rng.torch_normal((bs, horizon, self.model.chain.n_joints))
        chunks = torch.stack([self.prepared[i].angles[s:s + horizon]
                              for i, s in zip(ep_idx, starts)])

        keys, idx_map = self._gather_frames(ep_idx, starts)
        rgb = torch.stack([self.prepared[i].rgb[f] for i, f in keys])
        depth = torch.stack([self.prepared[i].depth[f] for i, f in keys])
        text_tokens = text_mask = None
        if self.model.use_language:
            text_tokens = torch.stack([self.prepared[i].text_tokens
                                       for i, _ in keys])
            text_mask = torch.stack([self.prepared[i].text_mask for i, _ in keys])

        perception = self.model.perceive(rgb, depth, text_tokens, text_mask)
        obs = self.model.condition(
            self.model.expand_perception(perception, idx_map),
            self.model.torch_chain.joint_state(cond))

        depth_tgt = depth_omega = None
        if (not cfg.ablation.disable_depth_loss
                and all(self.prepared[i].depth_tgt is not None for i, _ in keys)):
            depth_tgt = torch.stack([self.prepared[i].depth_tgt[f]
                                     for i, f in keys])[idx_map]
            depth_omega = torch.stack([self.prepared[i].depth_omega[f]
                                       for i, f in keys])[idx_map]

        _, parts = losses.total_loss(self.model, obs, chunks, t, noise,
                                     depth_tgt, depth_omega)
        parts["_episodes"] = ep_idx
        return parts

    def _perception_loss(self, rng: Rng) -> dict:
        cfg = self.cfg
        bs = cfg.optim.batch_size
        ep_idx = rng.integers(0, len(self.prepared), size=bs)
        starts = np.array([rng.integers(0, self.prepared[i].length)
                           for i in ep_idx], dtype=np.int64)
        keys, idx_map = self._gather_frames(ep_idx, starts)
        rgb = torch.stack([self.prepared[i].rgb[f] for i, f in keys])
        depth = torch.stack([self.prepared[i].depth[f] for i, f in keys])
        abl = cfg.ablation
        out = self.model.fusion(rgb, depth, self.model._geo(rgb.dtype),
                                pair_fusion=not abl.disable_pair_fusion,
                                aggregation=not abl.disable_aggregation)
        depth_tgt = torch.stack([self.prepared[i].depth_tgt[f]
                                 for i, f in keys])[idx_map]
        depth_omega = torch.stack([self.prepared[i].depth_omega[f]
                                   for i, f in keys])[idx_map]
        l_dep = losses.loss_depth(out["probs"][idx_map], depth_tgt, depth_omega)
        zero = torch.zeros((), dtype=l_dep.dtype)
        return {"diff": zero, "fk": zero, "depth": l_dep,
                "total": cfg.loss.lambda_depth * l_dep, "_episodes": ep_idx}

    # ------------------------------------------------------------ the loop
    def checkpoint_path(self, step=None) -> str:
        name = ("checkpoint_final.peafckpt" if step is None
                else f"checkpoint_{step:07d}.peafckpt")
        return os.path.join(self.out_dir, name)

    def save(self, path=None) -> str:
        path = path or self.checkpoint_path()
        save_checkpoint(path, self.model, self.optimizer, self.step,
                        self.run_hash)
        return path

    def run(self, max_step=None, stop_fn=None) -> dict:
        """Train to max_step (default: config), logging and checkpointing.

        stop_fn(step, metrics) is consulted at every metrics row; returning
        True ends training early (the final checkpoint is still written).
        """
        cfg = self.cfg
        max_step = cfg.optim.max_step if max_step is None else max_step
        last = {}
        while self.step < max_step:
            metrics = self.train_step()
            self.step += 1
            last = metrics
            at_log = self.step % cfg.log_every == 0 or self.step == max_step
            if at_log:
                self.metrics.write(self.step, metrics["diff"], metrics["fk"],
                                   metrics["depth"], metrics["lr"],
                                   metrics["grad_norm"])
            if cfg.ckpt_every and self.step % cfg.ckpt_every == 0 \
                    and self.step < max_step:
                self.save(self.checkpoint_path(self.step))
            if at_log and stop_fn is not None and stop_fn(self.step, metrics):
                break
        final = self.save()
        return {"final_step": self.step, "checkpoint": final,
                "metrics": self.metrics.path, "last": last}


def depth_accuracy(model: PolicyModel, prepared, *, frames_per_episode=None,
                   ) -> dict:
    """Held-out expected-depth quality of the perception front-end.

    For every token with a positive target weight, compares the model's
    expected depth against the expectation of the teacher-pooled target and
    counts tokens whose absolute error is below one bin width. Returns
    {"mae", "within_bin", "n_valid", "bin_width"} aggregated over all frames.
    """
    cfg = model.cfg
    spec = default_bin_spec(cfg)
    centers = torch.from_numpy(bin_centers(spec).astype(np.float32))
    width = (spec.d_max - spec.d_min) / spec.num_bins
    abl = cfg.ablation
    err_sum, n_valid, n_within = 0.0, 0, 0
    with torch.no_grad():
        for ep in prepared:
            if ep.depth_tgt is None:
                raise ValueError("depth_accuracy needs teacher targets")
            frames = range(ep.rgb.shape[0])
            if frames_per_episode is not None:
                frames = list(frames)[:frames_per_episode]
            for u in frames:
                out = model.fusion(ep.rgb[u:u + 1], ep.depth[u:u + 1],
                                   model._geo(torch.float32),
                                   pair_fusion=not abl.disable_pair_fusion,
                                   aggregation=not abl.disable_aggregation)
                expect = out["probs"][0] @ centers          # (V, N)
                target = ep.depth_tgt[u] @ centers          # (V, N)
                valid = ep.depth_omega[u] > 0.0
                err = (expect - target).abs()[valid]
                err_sum += float(err.sum())
                n_valid += int(valid.sum())
                n_within += int((err < width).sum())
    mae = err_sum / max(n_valid, 1)
    return {"mae": mae, "within_bin": n_within / max(n_valid, 1),
            "n_valid": n_valid, "bin_width": width}

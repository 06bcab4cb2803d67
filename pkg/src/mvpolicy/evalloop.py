"""Closed-loop evaluation in the synthetic world.

A rollout starts at the home configuration and alternates observe -> denoise
-> execute for a fixed step budget: each window re-corrupts the raw depth
(a fresh sensor read), runs the policy, and executes the leading exec-horizon
commands clamped to joint limits. The world is kinematic and the arms are not
drawn, so the clean renders are computed once per scene.

Success is measured at the final state: every instructed arm's gripper must
sit within SUCCESS_RADIUS of its target.
"""

from __future__ import annotations

import numpy as np
import torch

from . import synthworld
from .camgeom import Rig
from .config import RunConfig
from .diffusion import execute_window
from .kinematics import (KinematicChain, clamp_to_limits, forward_kinematics,
                         gripper_indices, home_angles)
from .model import PolicyModel
from .numcore import Rng

EVAL_BUDGET = 96          # closed-loop control steps per rollout
SUCCESS_RADIUS = 0.02     # meters, final gripper-to-target distance
_EVAL_TAG = 0xE7A1


def render_scene(scene, rig: Rig):
    """Clean per-view renders: rgb (V, H, W, 3) uint8, depth (V, H, W) f32."""
    rgb = np.stack([synthworld.render_rgb(scene, v) for v in rig.views])
    depth = np.stack([synthworld.render_depth(scene, v) for v in rig.views])
    return rgb, depth


def observe_frames(model: PolicyModel, rgb_u8: np.ndarray, raw_depth: np.ndarray,
                   text_tokens, text_mask, angles: np.ndarray) -> dict:
    """Build the conditioning dict for one frame set + joint configuration."""
    rgb = torch.from_numpy(rgb_u8.astype(np.float32) / 255.0)
    rgb = rgb.permute(0, 3, 1, 2)[None]
    dep = torch.from_numpy(raw_depth.astype(np.float32))[None, :, None]
    theta = torch.from_numpy(angles.astype(np.float32))[None]
    state = model.torch_chain.joint_state(theta)
    return model.observe(rgb, dep, text_tokens, text_mask, state)


def instructed_arms(targets: dict) -> list:
    return [side for side in ("left", "right") if targets.get(side) is not None]


def final_distances(chain: KinematicChain, angles: np.ndarray,
                    targets: dict) -> dict:
    """Per-instructed-arm gripper-to-target distance at a configuration."""
    pos, _ = forward_kinematics(chain, angles)
    grip = gripper_indices(chain)
    return {side: float(np.linalg.norm(pos[grip[side]] - targets[side]))
            for side in instructed_arms(targets)}


def rollout(model: PolicyModel, rig: Rig, scene, targets: dict,
            instruction: str, rng: Rng, *, windows: int = None) -> dict:
    """One closed-loop episode; returns distances, success, and the trace."""
    cfg = model.cfg
    chain = model.chain
    exec_h = cfg.decoder.exec_horizon
    if windows is None:
        windows = max(1, EVAL_BUDGET // exec_h)
    rgb_u8, clean_depth = render_scene(scene, rig)
    text_tokens = text_mask = None
    if model.use_language:
        text_tokens, text_mask = model.embed_text([instruction])

    angles = home_angles(chain).astype(np.float32)
    trace = [angles.copy()]
    model.eval()
    with torch.no_grad():
        for _ in range(windows):
            sensor_rng, sampler_rng = rng.split(2)
            raw = np.stack([synthworld.corrupt_depth(clean_depth[v], sensor_rng,
                                                     cfg.world)
                            for v in range(clean_depth.shape[0])])
            obs = observe_frames(model, rgb_u8, raw, text_tokens, text_mask,
                                 angles)
            traj = model.sample_actions(obs, sampler_rng)
            commands = execute_window(traj, exec_h)[0].numpy()
            for row in commands:
                angles = clamp_to_limits(chain, row.astype(np.float64),
                                         warn=False).astype(np.float32)
                trace.append(angles.copy())

    dists = final_distances(chain, angles.astype(np.float64), targets)
    success = all(d <= SUCCESS_RADIUS for d in dists.values())
    return {
        "success": bool(success),
        "distances": dists,
        "mean_distance": float(np.mean(list(dists.values()))),
        "steps": len(trace) - 1,
        "trace": np.stack(trace),
    }


def evaluate(model: PolicyModel, rig: Rig, cfg: RunConfig, families,
             trials: int, seed: int, *, windows: int = None) -> dict:
    """trials rollouts per family on freshly sampled scenes; aggregate report.

    The rig is reduced to the configured view subset so renders match the
    model's geometry. Scene sampling and rollout noise derive from
    (seed, family index, trial), independent of evaluation order.
    """
    sub = rig.subset(tuple(cfg.ablation.views))
    report = {"config_hash": cfg.config_hash, "seed": int(seed),
              "trials": int(trials), "success_radius": SUCCESS_RADIUS,
              "families": {}}
    total_success = 0
    total_rollouts = 0
    for family in families:
        if family not in synthworld.FAMILIES:
            raise ValueError(f"unknown task family {family!r}")
        fam_id = synthworld.FAMILIES.index(family)
        rolls = []
        for trial in range(trials):
            root = Rng(np.random.SeedSequence([seed, _EVAL_TAG, fam_id, trial]))
            scene_rng, loop_rng = root.split(2)
            scene, targets, instruction = synthworld.sample_scene(
                family, scene_rng, cfg.world)
            out = rollout(model, sub, scene, targets, instruction, loop_rng,
                          windows=windows)
            rolls.append({"trial": trial, "instruction": instruction,
                          "success": out["success"],
                          "distances": out["distances"],
                          "mean_distance": out["mean_distance"]})
        n_succ = sum(r["success"] for r in rolls)
        total_success += n_succ
        total_rollouts += len(rolls)
        report["families"][family] = {
            "success_rate": n_succ / len(rolls),
            "mean_final_distance": float(np.mean([r["mean_distance"]
                                                  for r in rolls])),
            "rollouts": rolls,
        }
    report["overall_success_rate"] = (total_success / total_rollouts
                                      if total_rollouts else 0.0)
    return report

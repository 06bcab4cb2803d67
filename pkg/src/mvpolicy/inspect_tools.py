"""Offline diagnostics for a trained perception stack.

Three probes, each writing an artifact meant for eyeballing:
  * expected-depth maps  - per-view grayscale PNGs on the finest token grid;
  * consistency report   - anchor distances and token cosine similarity for
    oracle-matched cross-view token pairs vs. random cross-view pairs, as a
    commented CSV;
  * readout entropy      - attention entropy of the language-readout pooling,
    separating the text stream from the view streams.
"""

from __future__ import annotations

import csv
import os

import numpy as np
import torch
from PIL import Image

from . import synthworld
from .camgeom import Rig, bin_centers
from .evalloop import render_scene
from .model import PolicyModel, default_bin_spec
from .numcore import Rng

CONSISTENCY_COLUMNS = ("kind", "pairs", "mean_anchor_dist_m", "mean_cos_pre",
                       "mean_cos_post")


def _fusion_pass(model: PolicyModel, rgb_u8: np.ndarray,
                 raw_depth: np.ndarray) -> dict:
    rgb = torch.from_numpy(rgb_u8.astype(np.float32) / 255.0)
    rgb = rgb.permute(0, 3, 1, 2)[None]
    dep = torch.from_numpy(raw_depth.astype(np.float32))[None, :, None]
    abl = model.cfg.ablation
    with torch.no_grad():
        return model.fusion(rgb, dep, model._geo(torch.float32),
                            pair_fusion=not abl.disable_pair_fusion,
                            aggregation=not abl.disable_aggregation)


def expected_depth_images(model: PolicyModel, rgb_u8: np.ndarray,
                          raw_depth: np.ndarray, view_names, out_dir,
                          prefix: str = "expected_depth") -> list:
    """Per-view expected-depth grayscale PNGs on the finest token grid.

    Pixel intensity maps [d_min, d_max] to [0, 255]. Returns written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    spec = default_bin_spec(model.cfg)
    centers = torch.from_numpy(bin_centers(spec).astype(np.float32))
    out = _fusion_pass(model, rgb_u8, raw_depth)
    expected = (out["probs"][0] @ centers).numpy()        # (V, N)
    gh, gw = model.geometry.grids[0]
    paths = []
    for v, name in enumerate(view_names):
        img = expected[v, :gh * gw].reshape(gh, gw)
        scaled = (img - spec.d_min) / (spec.d_max - spec.d_min)
        gray = (np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)
        path = os.path.join(out_dir, f"{prefix}_{name}.png")
        Image.fromarray(gray, mode="L").save(path)
        paths.append(path)
    return paths


def _pair_stats(anchors: torch.Tensor, pre: torch.Tensor, post: torch.Tensor,
                pairs) -> dict:
    """anchors (V, N, 3); pre/post (V, N, d); pairs: (va, ta, vb, tb) tuples."""
    if not pairs:
        return {"pairs": 0, "mean_anchor_dist_m": float("nan"),
                "mean_cos_pre": float("nan"), "mean_cos_post": float("nan")}
    va, ta, vb, tb = (torch.tensor([p[k] for p in pairs], dtype=torch.int64)
                      for k in range(4))
    dist = (anchors[va, ta] - anchors[vb, tb]).norm(dim=-1)
    cos = torch.nn.functional.cosine_similarity
    return {
        "pairs": len(pairs),
        "mean_anchor_dist_m": float(dist.mean()),
        "mean_cos_pre": float(cos(pre[va, ta], pre[vb, tb], dim=-1).mean()),
        "mean_cos_post": float(cos(post[va, ta], post[vb, tb], dim=-1).mean()),
    }


def consistency_report(model: PolicyModel, scene, rig: Rig, rng: Rng,
                       out_csv) -> dict:
    """Cross-view consistency of anchors and token features, as CSV + dict.

    Oracle-matched token pairs (mutual, same pyramid level) are compared with
    an equally sized set of random cross-view token pairs drawn uniformly;
    collisions with true matches are left in (they are a vanishing fraction).
    """
    cfg = model.cfg
    sub = rig.subset(tuple(cfg.ablation.views))
    rgb_u8, clean = render_scene(scene, sub)
    sensor_rng, base_rng = rng.split(2)
    raw = np.stack([synthworld.corrupt_depth(clean[v], sensor_rng, cfg.world)
                    for v in range(clean.shape[0])])
    out = _fusion_pass(model, rgb_u8, raw)
    anchors, pre, post = out["anchors"][0], out["rgb_tokens"][0], out["tokens"][0]

    matched = [(p.view_a, p.token_a, p.view_b, p.token_b)
               for p in synthworld.ground_truth_correspondences(
                   scene, sub, cfg.camera.width, cfg.camera.height,
                   cfg.camera.strides)
               if p.view_a < p.view_b]
    num_views, num_tokens = anchors.shape[0], anchors.shape[1]
    random_pairs = []
    if num_views > 1:
        for _ in range(max(len(matched), 1)):
            va = int(base_rng.integers(0, num_views))
            vb = int(base_rng.integers(0, num_views - 1))
            vb = vb + 1 if vb >= va else vb
            random_pairs.append((va, int(base_rng.integers(0, num_tokens)),
                                 vb, int(base_rng.integers(0, num_tokens))))

    rows = {"corresponding": _pair_stats(anchors, pre, post, matched),
            "random": _pair_stats(anchors, pre, post, random_pairs)}
    with open(out_csv, "w", newline="") as fh:
        fh.write("# cross-view token consistency; one row per pair kind\n")
        fh.write("# corresponding: oracle-matched mutual cross-view pairs; "
                 "random: uniform cross-view token pairs\n")
        fh.write("# mean_anchor_dist_m: mean 3D distance between predicted "
                 "anchors; mean_cos_pre/post: token cosine similarity before/"
                 "after geometry fusion\n")
        writer = csv.writer(fh)
        writer.writerow(CONSISTENCY_COLUMNS)
        for kind, stats in rows.items():
            writer.writerow([kind, stats["pairs"],
                             f"{stats['mean_anchor_dist_m']:.6f}",
                             f"{stats['mean_cos_pre']:.6f}",
                             f"{stats['mean_cos_post']:.6f}"])
    return rows


def _entropy(weights: torch.Tensor) -> float:
    """Mean Shannon entropy (nats) of the trailing softmax axis."""
    w = weights.clamp_min(0.0)
    logw = torch.where(w > 0, torch.log(w), torch.zeros_like(w))
    return float(-(w * logw).sum(dim=-1).mean())


def readout_entropy(model: PolicyModel, rgb_u8: np.ndarray,
                    instruction: str) -> dict:
    """Attention entropy of the readout pooling layers for one observation."""
    if not model.use_language:
        raise ValueError("language readout is disabled in this config")
    text_tokens, text_mask = model.embed_text([instruction])
    rgb = torch.from_numpy(rgb_u8.astype(np.float32) / 255.0)
    rgb = rgb.permute(0, 3, 1, 2)[None]
    with torch.no_grad():
        readout = model.readout
        patches = readout.patch_embed(rgb)
        latents = readout.grounded_latents(text_tokens, text_mask, patches)
        mask = text_mask[:, None].expand(-1, latents.shape[1], -1)
        _, view_w = readout.view_pool(latents, mask, return_weights=True)
        _, text_w = readout.text_pool(text_tokens, text_mask,
                                      return_weights=True)
    n_valid = int(text_mask[0].sum())
    return {
        "text_entropy": _entropy(text_w),
        "view_entropy": _entropy(view_w),
        "max_entropy": float(np.log(max(n_valid, 1))),
        "valid_text_tokens": n_valid,
    }

"""Geometry-guided fusion: neighbor selection vs brute force, distance-softmax
oracles, lift linearity, gate identities, and view-permutation equivariance."""

import math

import numpy as np
import pytest
import torch

from mvpolicy.camgeom import build_token_geometry, level_grids
from mvpolicy.model import default_bin_spec
from mvpolicy.config import FusionConfig, RunConfig
from mvpolicy.mvfusion import (
    DELTA_SQ_FLOOR,
    GeometryFusion,
    PairFusion,
    PointEmbed,
    PyramidEncoder,
    aggregate,
    expected_depth,
    flatten_pyramid,
    lift,
    select_neighbors,
    torch_geometry,
)
from mvpolicy.numcore import Rng, init_parameters

CFG = RunConfig.tiny()


def _tiny_geo(rig, cfg=CFG, dtype=torch.float32):
    geo = build_token_geometry(rig, cfg.camera.width, cfg.camera.height,
                               default_bin_spec(cfg), cfg.camera.strides)
    return torch_geometry(geo, dtype=dtype)


# ---------------------------------------------------------------------------
# Neighbor selection vs an exhaustive scan


def _brute_force_neighbors(anchors: np.ndarray, k: int) -> np.ndarray:
    """O(N^2) reference: same float32 distance expression, stable order."""
    num_views, n_tok, _ = anchors.shape
    flat = np.ascontiguousarray(anchors, dtype=np.float32).reshape(-1, 3)
    k_eff = min(k, (num_views - 1) * n_tok)
    out = np.empty((num_views, n_tok, k_eff), dtype=np.int64)
    for v in range(num_views):
        cand = np.array([i for i in range(num_views * n_tok) if i // n_tok != v])
        for n in range(n_tok):
            diff = flat[cand] - flat[v * n_tok + n]
            dist = np.sqrt(np.maximum((diff * diff).sum(-1), DELTA_SQ_FLOOR))
            order = np.argsort(dist, kind="stable")
            out[v, n] = cand[order[:k_eff]]
    return out


def test_select_neighbors_matches_brute_force_random():
    rng = Rng(0)
    anchors = rng.uniform(-0.5, 0.5, size=(3, 40, 3)).astype(np.float32)
    for k in (1, 5, 16, 80):
        got = select_neighbors(anchors, k)
        ref = _brute_force_neighbors(anchors, k)
        assert np.array_equal(got, ref)


def test_select_neighbors_tie_break_is_candidate_order():
    # identical anchors -> every distance ties -> first K in (view, token) order
    anchors = np.zeros((3, 4, 3), dtype=np.float32)
    got = select_neighbors(anchors, 5)
    ref = _brute_force_neighbors(anchors, 5)
    assert np.array_equal(got, ref)
    # view 0 candidates start at flat index 4 (first token of view 1)
    assert got[0, 0].tolist() == [4, 5, 6, 7, 8]
    # view 1 candidates: view 0 tokens then view 2 tokens
    assert got[1, 0].tolist() == [0, 1, 2, 3, 8]


def test_select_neighbors_never_returns_same_view():
    rng = Rng(1)
    anchors = rng.normal(size=(4, 30, 3)).astype(np.float32)
    idx = select_neighbors(anchors, 16)
    view_of = idx // 30
    for v in range(4):
        assert np.all(view_of[v] != v)
    assert idx.shape == (4, 30, 16)


def test_select_neighbors_caps_k_and_handles_single_view():
    rng = Rng(2)
    anchors = rng.normal(size=(2, 3, 3)).astype(np.float32)
    idx = select_neighbors(anchors, 99)
    assert idx.shape == (2, 3, 3)  # only 3 candidates exist in the other view
    solo = select_neighbors(anchors[:1], 4)
    assert solo.shape == (1, 3, 0)


# ---------------------------------------------------------------------------
# Distance-softmax aggregation


def test_aggregate_alpha_hand_oracle_at_default_tau():
    tau = FusionConfig().tau
    assert tau == 0.08  # pinned default used by the hand numbers below
    anchors = torch.tensor([
        [[0.0, 0.0, 0.0]],
        [[0.1, 0.0, 0.0]],
        [[0.3, 0.0, 0.0]],
    ])  # (V=3, N=1, 3)
    feats = torch.tensor([[[2.0, 0.0]], [[0.0, 4.0]], [[8.0, 8.0]]])
    idx = torch.from_numpy(select_neighbors(anchors.numpy(), 2))
    h, alpha = aggregate(feats, anchors, idx, tau, return_alpha=True)
    # token of view 0: neighbors at distances 0.1 and 0.3
    e1, e2 = math.exp(-0.1 / tau), math.exp(-0.3 / tau)
    a1, a2 = e1 / (e1 + e2), e2 / (e1 + e2)
    assert abs(float(alpha[0, 0, 0]) - a1) < 1e-6
    assert abs(float(alpha[0, 0, 1]) - a2) < 1e-6
    expect = torch.tensor([a1 * 0.0 + a2 * 8.0, a1 * 4.0 + a2 * 8.0])
    assert torch.allclose(h[0, 0], expect, atol=1e-6)
    # rows are simplex weights
    assert torch.allclose(alpha.sum(-1), torch.ones(3, 1), atol=1e-6)


def test_aggregate_coincident_anchors_have_finite_gradients():
    anchors = torch.zeros((2, 2, 3), dtype=torch.float64, requires_grad=True)
    feats = Rng(3).torch_normal((2, 2, 5), torch.float64).requires_grad_(True)
    idx = torch.from_numpy(select_neighbors(
        np.zeros((2, 2, 3), dtype=np.float32), 2))
    h = aggregate(feats, anchors, idx, 0.08)
    h.sum().backward()
    assert torch.isfinite(anchors.grad).all()
    assert torch.isfinite(feats.grad).all()
    # equal distances -> uniform weights -> mean of the two neighbors
    with torch.no_grad():
        ref = 0.5 * (feats[1] + feats[1].flip(0))
        assert torch.allclose(h[0].detach(), ref, atol=1e-12)


def test_aggregate_zero_neighbors_returns_zeros():
    feats = Rng(4).torch_normal((1, 3, 4))
    anchors = torch.zeros(1, 3, 3)
    idx = torch.zeros((1, 3, 0), dtype=torch.int64)
    h = aggregate(feats, anchors, idx, 0.08)
    assert torch.all(h == 0.0) and h.shape == feats.shape


# ---------------------------------------------------------------------------
# Lift: anchors and expected point embeddings


def test_lift_anchor_is_expected_backprojection(tiny_rig):
    geo = _tiny_geo(tiny_rig, dtype=torch.float64)
    rng = Rng(5)
    v, n, b = geo.num_views, geo.tokens_per_view, geo.depths.shape[0]
    logits = rng.torch_normal((2, v, n, b), torch.float64)
    probs = torch.softmax(logits, dim=-1)
    phi = PointEmbed(6, 8).double()
    init_parameters(phi, Rng(6))
    anchors, embeds = lift(probs, phi, geo)
    # dense second route: sum_i p_i * (o + d_i r) and sum_i p_i * phi(...)
    pts = geo.origins[:, None, None, :] + geo.depths[None, None, :, None] \
        * geo.rays[:, :, None, :]                        # (V, N, B, 3)
    ref_anchor = torch.einsum("cvnb,vnbx->cvnx", probs, pts)
    assert float((anchors - ref_anchor).detach().abs().max()) < 1e-12
    ref_embed = torch.einsum("cvnb,vnbe->cvne", probs, phi(pts))
    assert float((embeds - ref_embed).detach().abs().max()) < 1e-12
    assert embeds.shape == (2, v, n, 6)


def test_point_embed_chunking_invariant(tiny_rig):
    geo = _tiny_geo(tiny_rig, dtype=torch.float64)
    rng = Rng(7)
    v, n, b = geo.num_views, geo.tokens_per_view, geo.depths.shape[0]
    probs = torch.softmax(rng.torch_normal((1, v, n, b), torch.float64), dim=-1)
    phi = PointEmbed(4, 8).double()
    init_parameters(phi, Rng(8))
    full = phi.expected_embed(probs, geo.origins, geo.rays, geo.depths, chunk=b)
    small = phi.expected_embed(probs, geo.origins, geo.rays, geo.depths, chunk=3)
    assert float((full - small).abs().max()) < 1e-12


def test_expected_depth_oracle():
    probs = torch.tensor([[0.25, 0.5, 0.25], [1.0, 0.0, 0.0]])
    depths = torch.tensor([0.1, 0.2, 0.4])
    got = expected_depth(probs, depths)
    assert torch.allclose(got, torch.tensor([0.025 + 0.1 + 0.1, 0.1]), atol=1e-7)


# ---------------------------------------------------------------------------
# Encoders and token layout


def test_pyramid_encoder_grids_and_flatten_order():
    enc = PyramidEncoder(3, base=4, out_dim=6)
    init_parameters(enc, Rng(9))
    grids = level_grids(64, 64)
    assert grids == [(8, 8), (4, 4), (2, 2), (1, 1)]
    x = Rng(10).torch_normal((2, 3, 64, 64))
    levels = enc(x, grids)
    assert [tuple(lv.shape) for lv in levels] == [
        (2, 6, 8, 8), (2, 6, 4, 4), (2, 6, 2, 2), (2, 6, 1, 1)]
    flat = flatten_pyramid(levels)
    assert flat.shape == (2, 85, 6)
    # row-major order, finest first: token 0 = level-0 pixel (0, 0), token 8
    # = level-0 pixel (1, 0), token 64 = level-1 pixel (0, 0)
    assert torch.equal(flat[:, 0], levels[0][:, :, 0, 0])
    assert torch.equal(flat[:, 8], levels[0][:, :, 1, 0])
    assert torch.equal(flat[:, 64], levels[1][:, :, 0, 0])
    assert torch.equal(flat[:, 84], levels[3][:, :, 0, 0])


def test_pyramid_encoder_crops_to_floor_grids():
    # 320x256 produces the documented production grids
    assert level_grids(320, 256) == [(32, 40), (16, 20), (8, 10), (4, 5)]


def test_pair_fusion_bypass_returns_projection_and_raw_depth():
    pf = PairFusion(12, 8, heads=2, ffn=16)
    init_parameters(pf, Rng(11))
    rgb = Rng(12).torch_normal((3, 5, 12))
    dep = Rng(13).torch_normal((3, 5, 8))
    r, d = pf(rgb, dep, fuse=False)
    assert torch.equal(d, dep)
    assert torch.allclose(r, pf.rgb_proj(rgb))
    r2, d2 = pf(rgb, dep)
    assert not torch.allclose(d2, dep, atol=1e-4)
    assert r2.shape == (3, 5, 8) and d2.shape == (3, 5, 8)


# ---------------------------------------------------------------------------
# Full fusion module


def _fusion_module(dtype=torch.float32):
    m = GeometryFusion(CFG.encoder, CFG.fusion)
    init_parameters(m, Rng(14))
    if dtype == torch.float64:
        m = m.double()
    return m


def test_depth_distributions_are_simplex(tiny_rig):
    geo = _tiny_geo(tiny_rig)
    m = _fusion_module()
    rng = Rng(15)
    v = geo.num_views
    rgb = rng.torch_uniform(0.0, 1.0, (1, v, 3, CFG.camera.height, CFG.camera.width))
    dep = rng.torch_uniform(0.1, 1.0, (1, v, 1, CFG.camera.height, CFG.camera.width))
    out = m(rgb, dep, geo)
    probs = out["probs"]
    assert probs.shape == (1, v, geo.tokens_per_view, CFG.fusion.num_bins)
    assert float((probs.sum(-1) - 1.0).abs().max()) < 1e-6
    assert float(probs.min()) >= 0.0
    assert out["tokens"].shape == (1, v, geo.tokens_per_view, CFG.encoder.token_dim)
    assert out["anchors"].shape == (1, v, geo.tokens_per_view, 3)
    assert out["neighbor_idx"].shape[-1] == min(
        CFG.fusion.knn_k, (v - 1) * geo.tokens_per_view)


def test_gate_zero_is_exact_identity_on_rgb_stream(tiny_rig):
    geo = _tiny_geo(tiny_rig)
    m = _fusion_module()
    with torch.no_grad():
        m.gate.zero_()
    rng = Rng(16)
    v, n = geo.num_views, geo.tokens_per_view
    rgb_tok = rng.torch_normal((1, v, n, CFG.encoder.token_dim))
    dep_tok = rng.torch_normal((1, v, n, CFG.encoder.depth_dim))
    with_agg = m.fuse_tokens(rgb_tok, dep_tok, geo, aggregation=True)
    without = m.fuse_tokens(rgb_tok, dep_tok, geo, aggregation=False)
    assert torch.equal(with_agg["tokens"], without["tokens"])
    assert without["neighbor_idx"] is None
    assert with_agg["neighbor_idx"] is not None


def test_gate_default_init_value():
    m = _fusion_module()
    assert float(m.gate.detach()) == CFG.fusion.gate_init


def test_ablation_flags_change_paths(tiny_rig):
    geo = _tiny_geo(tiny_rig)
    m = _fusion_module()
    rng = Rng(17)
    v, n = geo.num_views, geo.tokens_per_view
    rgb_tok = rng.torch_normal((1, v, n, CFG.encoder.token_dim))
    dep_tok = rng.torch_normal((1, v, n, CFG.encoder.depth_dim))
    base = m.fuse_tokens(rgb_tok, dep_tok, geo)
    no_pair = m.fuse_tokens(rgb_tok, dep_tok, geo, pair_fusion=False)
    assert not torch.allclose(base["probs"], no_pair["probs"], atol=1e-5)
    no_agg = m.fuse_tokens(rgb_tok, dep_tok, geo, aggregation=False)
    assert not torch.allclose(base["tokens"], no_agg["tokens"], atol=1e-5)
    # depth distributions don't depend on aggregation (computed upstream)
    assert torch.equal(base["probs"], no_agg["probs"])


def test_fixed_neighbor_indices_are_respected(tiny_rig):
    geo = _tiny_geo(tiny_rig)
    m = _fusion_module()
    rng = Rng(18)
    v, n = geo.num_views, geo.tokens_per_view
    rgb_tok = rng.torch_normal((1, v, n, CFG.encoder.token_dim))
    dep_tok = rng.torch_normal((1, v, n, CFG.encoder.depth_dim))
    out = m.fuse_tokens(rgb_tok, dep_tok, geo)
    again = m.fuse_tokens(rgb_tok, dep_tok, geo, neighbor_idx=out["neighbor_idx"])
    assert torch.equal(out["tokens"], again["tokens"])
    assert torch.equal(again["neighbor_idx"], out["neighbor_idx"])


def test_view_permutation_equivariance_float64(tiny_rig):
    from mvpolicy.mvfusion import TorchGeometry

    geo = _tiny_geo(tiny_rig, dtype=torch.float64)
    m = _fusion_module(torch.float64)
    rng = Rng(19)
    v, n = geo.num_views, geo.tokens_per_view
    rgb_tok = rng.torch_normal((1, v, n, CFG.encoder.token_dim), torch.float64)
    dep_tok = rng.torch_normal((1, v, n, CFG.encoder.depth_dim), torch.float64)
    out = m.fuse_tokens(rgb_tok, dep_tok, geo)

    perm = [2, 0, 3, 1][:v]
    geo_p = TorchGeometry(geo.centers, geo.strides, geo.level_ids, geo.grids,
                          geo.origins[perm], geo.rays[perm], geo.depths)
    out_p = m.fuse_tokens(rgb_tok[:, perm], dep_tok[:, perm], geo_p)
    for key in ("tokens", "anchors", "probs"):
        assert float((out_p[key] - out[key][:, perm]).abs().max()) < 1e-12


def test_encode_views_rejects_mismatched_extents(tiny_rig):
    geo = _tiny_geo(tiny_rig)
    m = _fusion_module()
    rgb = torch.zeros(1, 2, 3, 64, 64)
    dep = torch.zeros(1, 2, 1, 32, 64)
    with pytest.raises(ValueError, match="extents"):
        m.encode_views(rgb, dep, geo.grids)


def test_torch_geometry_level_ids(tiny_rig):
    geo = _tiny_geo(tiny_rig)
    counts = torch.bincount(geo.level_ids)
    assert counts.tolist() == [h * w for h, w in geo.grids]
    assert geo.level_ids[0] == 0 and geo.level_ids[-1] == len(geo.grids) - 1

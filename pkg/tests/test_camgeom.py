import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvpolicy.camgeom import (
    DEFAULT_STRIDES,
    CameraView,
    DepthBinSpec,
    Extrinsics,
    Intrinsics,
    Rig,
    all_token_centers,
    backproject,
    bin_centers,
    build_token_geometry,
    level_grids,
    load_rig,
    look_at,
    matrix_to_quat,
    project,
    project_many,
    quat_to_matrix,
    rig_digest,
    save_rig,
    token_centers,
)

INTR = Intrinsics(fx=256.0, fy=256.0, cx=160.0, cy=128.0, width=320, height=256)


def _demo_rig() -> Rig:
    views = []
    for name, pos in [("front", (0.9, 0.0, 0.4)), ("head", (0.0, 0.0, 1.0)),
                      ("left_wrist", (0.3, 0.5, 0.5)),
                      ("right_wrist", (0.3, -0.5, 0.5))]:
        views.append(CameraView(name=name, intrinsics=INTR,
                                extrinsics=look_at(pos, (0.3, 0.0, 0.1))))
    return Rig(views=tuple(views))


# ---------------------------------------------------------------------------
# depth bins


def test_bin_centers_two_bin_oracle():
    # width = (1.2 - 0.01) / 2 = 0.595; centers at d_min + (i + 0.5) * width
    spec = DepthBinSpec(num_bins=2, d_min=0.01, d_max=1.2)
    assert np.allclose(bin_centers(spec), [0.3075, 0.9025], atol=1e-12)


def test_bin_centers_cover_range_symmetrically():
    spec = DepthBinSpec(num_bins=128, d_min=0.01, d_max=1.2)
    c = bin_centers(spec)
    assert len(c) == 128
    assert c[0] - 0.01 == pytest.approx(1.2 - c[-1], abs=1e-12)
    assert np.all(np.diff(c) > 0)


def test_bin_spec_validation():
    with pytest.raises(ValueError):
        DepthBinSpec(num_bins=0, d_min=0.01, d_max=1.2)
    with pytest.raises(ValueError):
        DepthBinSpec(num_bins=4, d_min=1.2, d_max=0.01)


# ---------------------------------------------------------------------------
# projection


@given(st.floats(5.0, 315.0), st.floats(5.0, 251.0), st.floats(0.05, 1.15))
def test_project_backproject_round_trip(u, v, z):
    extr = look_at((0.8, 0.2, 0.5), (0.3, 0.0, 0.1))
    point = backproject(INTR, extr, np.array([u, v]), z)
    uu, vv, zz = project(INTR, extr, point)
    assert abs(uu - u) < 1e-6
    assert abs(vv - v) < 1e-6
    assert abs(zz - z) < 1e-6


def test_backproject_rejects_nonpositive_depth():
    with pytest.raises(ValueError):
        backproject(INTR, Extrinsics.identity(), np.array([10.0, 10.0]), 0.0)


def test_project_behind_camera_is_none():
    extr = Extrinsics.identity()   # camera at origin looking down +z
    assert project(INTR, extr, np.array([0.0, 0.0, -0.5])) is None


def test_project_many_matches_scalar_project():
    extr = look_at((0.5, -0.3, 0.7), (0.3, 0.0, 0.1))
    pts = np.array([[0.3, 0.0, 0.1], [0.2, 0.1, 0.05], [0.4, -0.2, 0.3]])
    uv, z, valid = project_many(INTR, extr, pts)
    for i, p in enumerate(pts):
        u, v, d = project(INTR, extr, p)
        assert valid[i]
        assert np.allclose(uv[i], [u, v], atol=1e-12)
        assert z[i] == pytest.approx(d, abs=1e-12)


def test_look_at_center_pixel_ray_hits_target():
    position, target = np.array([0.9, 0.1, 0.6]), np.array([0.3, 0.0, 0.1])
    extr = look_at(position, target)
    dist = np.linalg.norm(target - position)
    # the optical axis has unit camera z, so depth to the target is the
    # projection of the offset on the axis; for the center pixel that equals
    # the full distance only if the ray is the axis itself
    u, v, z = project(INTR, extr, target)
    assert u == pytest.approx(INTR.cx, abs=1e-6)
    assert v == pytest.approx(INTR.cy, abs=1e-6)
    assert z == pytest.approx(dist, rel=1e-9)


@given(st.tuples(*[st.floats(-1, 1) for _ in range(4)]))
def test_quat_matrix_round_trip(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm < 1e-3:
        return
    q = q / norm
    m = quat_to_matrix(q)
    assert np.allclose(m @ m.T, np.eye(3), atol=1e-10)
    back = matrix_to_quat(m)
    # q and -q encode the same rotation
    assert (np.allclose(back, q, atol=1e-8)
            or np.allclose(back, -q, atol=1e-8))


# ---------------------------------------------------------------------------
# token grids


def test_level_grids_default_resolution_oracle():
    grids = level_grids(320, 256, DEFAULT_STRIDES)
    assert grids == [(32, 40), (16, 20), (8, 10), (4, 5)]
    assert sum(h * w for h, w in grids) == 1700


def test_all_token_centers_count_and_strides():
    centers, strides = all_token_centers(320, 256, DEFAULT_STRIDES)
    assert centers.shape == (1700, 2)
    counts = {s: int((strides == s).sum()) for s in DEFAULT_STRIDES}
    assert counts == {8: 1280, 16: 320, 32: 80, 64: 20}


def test_token_centers_row_major_formula():
    c = token_centers(16, (2, 3))
    # token (r, c) -> ((c + .5) * s, (r + .5) * s), row-major
    assert np.allclose(c[0], [8.0, 8.0])
    assert np.allclose(c[1], [24.0, 8.0])
    assert np.allclose(c[3], [8.0, 24.0])
    assert c.shape == (6, 2)


def test_level_grids_rejects_too_small_image():
    with pytest.raises(ValueError):
        level_grids(32, 32, (64,))


# ---------------------------------------------------------------------------
# rigs


def test_rig_requires_canonical_order_and_uniqueness():
    rig = _demo_rig()
    with pytest.raises(ValueError):
        Rig(views=(rig.views[1], rig.views[0]))
    with pytest.raises(ValueError):
        Rig(views=(rig.views[0], rig.views[0]))


def test_rig_subset_any_canonical_subset():
    rig = _demo_rig()
    assert rig.subset(("head",)).names == ("head",)
    assert rig.subset(("front", "right_wrist")).names == ("front", "right_wrist")
    assert rig.subset(rig.names).names == rig.names


def test_rig_digest_stable_and_sensitive():
    a, b = _demo_rig(), _demo_rig()
    assert rig_digest(a) == rig_digest(b)
    assert rig_digest(a.subset(("head",))) != rig_digest(a)


def test_rig_save_load_round_trip(tmp_path):
    rig = _demo_rig()
    path = tmp_path / "rig.json"
    save_rig(rig, path)
    loaded = load_rig(path)
    assert loaded.names == rig.names
    assert rig_digest(loaded) == rig_digest(rig)


# ---------------------------------------------------------------------------
# token geometry


def test_token_geometry_anchor_formula_matches_backproject():
    rig = _demo_rig()
    spec = DepthBinSpec(num_bins=8, d_min=0.01, d_max=1.2)
    geo = build_token_geometry(rig, 320, 256, spec, DEFAULT_STRIDES)
    assert geo.tokens_per_view == 1700
    assert geo.rays.shape == (4, 1700, 3)
    depth = float(geo.depths[3])
    for v, view in enumerate(rig.views):
        for n in (0, 700, 1699):
            anchor = geo.origins[v] + depth * geo.rays[v, n]
            direct = backproject(view.intrinsics, view.extrinsics,
                                 geo.centers[n], depth)
            assert np.allclose(anchor, direct, atol=1e-9)


def test_token_geometry_rejects_mismatched_intrinsics():
    rig = _demo_rig()
    spec = DepthBinSpec(num_bins=8, d_min=0.01, d_max=1.2)
    with pytest.raises(ValueError):
        build_token_geometry(rig, 160, 128, spec, DEFAULT_STRIDES)

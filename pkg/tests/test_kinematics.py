"""Kinematic chain: FK against an independent rotation-matrix route, IK
round-trips, hop distances, limits, and the built-in dual-arm embodiment."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mvpolicy.camgeom import quat_to_matrix
from mvpolicy.kinematics import (
    DISTAL,
    SHOULDER,
    STATE_DIM,
    UPPER_ARM,
    Joint,
    KinematicChain,
    TorchChain,
    arm_slice,
    canonicalize_sign,
    clamp_to_limits,
    dual_arm_chain,
    forward_kinematics,
    gripper_indices,
    home_angles,
    ik_reach,
    link_hop_distances,
    load_chain,
    quat_from_numpy_chain_check,
    quat_mul_t,
    quat_rotate_t,
    reachable,
    save_chain,
)
from mvpolicy.numcore import Rng

CHAIN = dual_arm_chain()


# ---------------------------------------------------------------------------
# Independent FK route: rotation matrices built from axis-angle (Rodrigues),
# no quaternions anywhere, composed the same parent-first way.


def _rodrigues(axis, angle):
    ax = np.asarray(axis, dtype=np.float64)
    k = np.array([[0.0, -ax[2], ax[1]],
                  [ax[2], 0.0, -ax[0]],
                  [-ax[1], ax[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _fk_matrix_route(chain, theta):
    rots, pos = [], []
    for i, j in enumerate(chain.joints):
        r_par = np.eye(3) if j.parent == -1 else rots[j.parent]
        p_par = np.zeros(3) if j.parent == -1 else pos[j.parent]
        p = p_par + r_par @ np.asarray(j.translation)
        r = r_par @ quat_to_matrix(np.asarray(j.quaternion)) @ _rodrigues(j.axis, theta[i])
        rots.append(r)
        pos.append(p)
    return np.stack(pos), rots


def test_fk_matches_matrix_route_on_random_angles():
    rng = Rng(0)
    lo, hi = CHAIN.lower_limits, CHAIN.upper_limits
    for _ in range(20):
        theta = lo + rng.uniform(size=CHAIN.n_joints) * (hi - lo)
        p, q = forward_kinematics(CHAIN, theta)
        p_ref, rots_ref = _fk_matrix_route(CHAIN, theta)
        assert np.abs(p - p_ref).max() < 1e-10
        for i in range(CHAIN.n_joints):
            assert np.abs(quat_to_matrix(q[i]) - rots_ref[i]).max() < 1e-10


def test_fk_zero_pose_positions_hand_oracle():
    theta = np.zeros(CHAIN.n_joints)
    p, q = forward_kinematics(CHAIN, theta)
    # all fixed transforms point down +x from the shoulder; link lengths add up
    sx, sy, sz = SHOULDER
    expect_left = np.array([
        [sx, sy, sz],                 # shoulder_yaw
        [sx, sy, sz],                 # shoulder_pitch (coincident)
        [sx + 0.25, sy, sz],          # elbow
        [sx + 0.47, sy, sz],          # wrist_pitch
        [sx + 0.50, sy, sz],          # wrist_roll
        [sx + 0.52, sy, sz],          # wrist_yaw
        [sx + 0.55, sy, sz],          # gripper
    ])
    assert np.abs(p[:7] - expect_left).max() < 1e-12
    # right arm mirrors y
    mirrored = expect_left * np.array([1.0, -1.0, 1.0])
    assert np.abs(p[7:] - mirrored).max() < 1e-12
    # zero angles + identity fixed rotations -> identity quaternions
    assert np.abs(q - np.array([1.0, 0.0, 0.0, 0.0])).max() < 1e-12


def test_fk_shoulder_pitch_quarter_turn():
    # pitching the left shoulder down by pi/2 rotates the whole arm to -z
    theta = np.zeros(CHAIN.n_joints)
    theta[1] = math.pi / 2
    p, _ = forward_kinematics(CHAIN, theta)
    sx, sy, sz = SHOULDER
    assert np.abs(p[2] - np.array([sx, sy, sz - UPPER_ARM])).max() < 1e-12
    assert np.abs(p[6] - np.array([sx, sy, sz - UPPER_ARM - DISTAL])).max() < 1e-12
    # right arm untouched
    assert np.abs(p[13] - np.array([sx + 0.55, -sy, sz])).max() < 1e-12


def test_fk_batched_matches_loop():
    rng = Rng(1)
    thetas = rng.torch_normal((3, 5, CHAIN.n_joints), torch.float64) * 0.4
    tc = TorchChain(CHAIN, dtype=torch.float64)
    p, q = tc.fk(thetas)
    assert p.shape == (3, 5, CHAIN.n_joints, 3)
    assert q.shape == (3, 5, CHAIN.n_joints, 4)
    for i in range(3):
        for j in range(5):
            pi, qi = tc.fk(thetas[i, j])
            assert torch.equal(p[i, j], pi)
            assert torch.equal(q[i, j], qi)


def test_fk_quaternions_unit_norm_and_continuous():
    rng = Rng(2)
    tc = TorchChain(CHAIN, dtype=torch.float64)
    theta = rng.torch_normal((CHAIN.n_joints,), torch.float64)
    _, q = tc.fk(theta)
    assert torch.allclose(q.norm(dim=-1), torch.ones(CHAIN.n_joints, dtype=torch.float64))
    # small angle step -> small quaternion step (no sign flips mid-trajectory)
    _, q2 = tc.fk(theta + 1e-4)
    assert float((q2 - q).abs().max()) < 1e-3


def test_fk_differentiable():
    tc = TorchChain(CHAIN, dtype=torch.float64)
    theta = torch.zeros(CHAIN.n_joints, dtype=torch.float64, requires_grad=True)
    p, _ = tc.fk(theta)
    p[6].sum().backward()
    g = theta.grad
    assert g is not None and torch.isfinite(g).all()
    # left-arm joints influence the left gripper; right-arm joints do not
    assert float(g[:7].abs().sum()) > 0.0
    assert float(g[7:].abs().sum()) == 0.0


def test_joint_state_layout():
    rng = Rng(3)
    tc = TorchChain(CHAIN, dtype=torch.float64)
    theta = rng.torch_normal((2, CHAIN.n_joints), torch.float64) * 0.3
    s = tc.joint_state(theta)
    assert s.shape == (2, CHAIN.n_joints, STATE_DIM)
    p, q = tc.fk(theta)
    assert torch.equal(s[..., 0], theta)
    assert torch.equal(s[..., 1:4], p)
    assert torch.equal(s[..., 4:8], q)


# ---------------------------------------------------------------------------
# Limits and clamping


def test_clamp_warns_and_fk_uses_clamped_angles():
    theta = np.zeros(CHAIN.n_joints)
    theta[2] = 99.0  # way past the elbow limit of 2.6
    with pytest.warns(UserWarning, match="clamped"):
        clamped = clamp_to_limits(CHAIN, theta)
    assert clamped[2] == CHAIN.upper_limits[2]
    with pytest.warns(UserWarning):
        p, q = forward_kinematics(CHAIN, theta)
    p_ref, q_ref = forward_kinematics(CHAIN, clamped)
    assert np.array_equal(p, p_ref) and np.array_equal(q, q_ref)


def test_clamp_within_limits_is_identity_no_warning():
    import warnings

    theta = np.zeros(CHAIN.n_joints)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = clamp_to_limits(CHAIN, theta)
    assert np.array_equal(out, theta)


def test_torch_chain_fk_does_not_clamp():
    # the training-graph route must stay exact on out-of-range angles
    tc = TorchChain(CHAIN, dtype=torch.float64)
    theta = torch.zeros(CHAIN.n_joints, dtype=torch.float64)
    theta[2] = 3.5  # beyond the 2.6 elbow limit
    p, _ = tc.fk(theta)
    ref, _ = _fk_matrix_route(CHAIN, theta.numpy())
    assert np.abs(p.numpy() - ref).max() < 1e-10


# ---------------------------------------------------------------------------
# Structure validation


def test_joint_validation():
    with pytest.raises(ValueError, match="axis"):
        Joint("j", -1, (1, 0, 0, 0), (0, 0, 0), (1, 1, 0), (-1, 1))
    with pytest.raises(ValueError, match="quaternion"):
        Joint("j", -1, (1, 1, 0, 0), (0, 0, 0), (1, 0, 0), (-1, 1))
    with pytest.raises(ValueError, match="limit"):
        Joint("j", -1, (1, 0, 0, 0), (0, 0, 0), (1, 0, 0), (1, -1))


def test_chain_rejects_forward_parent():
    good = Joint("a", -1, (1, 0, 0, 0), (0, 0, 0), (0, 0, 1), (-1, 1))
    bad = Joint("b", 1, (1, 0, 0, 0), (0, 0, 0), (0, 0, 1), (-1, 1))
    with pytest.raises(ValueError, match="parent"):
        KinematicChain((good, bad))


def test_index_lookup():
    assert CHAIN.index("left_gripper") == 6
    assert CHAIN.index("right_gripper") == 13
    with pytest.raises(KeyError):
        CHAIN.index("tail")


def test_gripper_indices_and_mask():
    assert gripper_indices(CHAIN) == {"left": 6, "right": 13}
    mask = CHAIN.gripper_mask
    assert mask.sum() == 2 and mask[6] and mask[13]
    assert arm_slice("left") == slice(0, 7)
    assert arm_slice("right") == slice(7, 14)


# ---------------------------------------------------------------------------
# Hop distances (dual route: Floyd-Warshall over the same undirected tree)


def _hops_floyd_warshall(chain):
    n = chain.n_joints
    big = 10 ** 6
    d = np.full((n + 1, n + 1), big)
    np.fill_diagonal(d, 0)
    for i, j in enumerate(chain.joints):
        p = n if j.parent == -1 else j.parent
        d[i, p] = d[p, i] = 1
    for k in range(n + 1):
        d = np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :])
    return d[:n, :n]


def test_hop_distances_match_floyd_warshall():
    got = link_hop_distances(CHAIN)
    assert np.array_equal(got, _hops_floyd_warshall(CHAIN))


def test_hop_distance_hand_oracles():
    d = link_hop_distances(CHAIN)
    assert np.array_equal(np.diag(d), np.zeros(14, dtype=np.int64))
    assert d[0, 6] == 6          # along the left arm
    assert d[0, 7] == 2          # shoulder to shoulder through the base
    assert d[6, 13] == 14        # gripper tip to gripper tip
    assert np.array_equal(d, d.T)


# ---------------------------------------------------------------------------
# IK and workspace


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6), st.sampled_from(["left", "right"]))
def test_ik_round_trip(seed, side):
    rng = Rng(seed)
    y_sign = 1.0 if side == "left" else -1.0
    shoulder = np.array([SHOULDER[0], y_sign * SHOULDER[1], SHOULDER[2]])
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = 0.15 + 0.35 * rng.uniform()
    target = shoulder + radius * direction
    if not reachable(target, side):
        return
    angles = ik_reach(target, side)
    theta = np.zeros(CHAIN.n_joints)
    theta[arm_slice(side)] = angles
    # every solution must respect the chain's joint limits as-is
    assert np.all(theta >= CHAIN.lower_limits) and np.all(theta <= CHAIN.upper_limits)
    p, _ = forward_kinematics(CHAIN, theta)
    tip = p[gripper_indices(CHAIN)[side]]
    assert np.linalg.norm(tip - target) < 1e-9


def test_ik_out_of_reach_raises():
    with pytest.raises(ValueError, match="out of reach"):
        ik_reach(np.array([2.0, 0.0, 0.0]), "left")
    assert not reachable(np.array([2.0, 0.0, 0.0]), "left")
    assert reachable(np.array([0.35, 0.25, 0.05]), "left")


def test_ik_leaves_wrist_zero_and_gripper_open():
    angles = ik_reach(np.array([0.3, 0.2, 0.0]), "left")
    assert angles.shape == (7,)
    assert np.array_equal(angles[3:6], np.zeros(3))
    assert angles[6] == 1.0


def test_home_pose_places_grippers_at_rest_targets():
    theta = home_angles(CHAIN)
    # raised rest targets force the elbow-up branch; still within all limits
    assert np.all(theta >= CHAIN.lower_limits) and np.all(theta <= CHAIN.upper_limits)
    p, _ = forward_kinematics(CHAIN, theta)
    assert np.linalg.norm(p[6] - np.array([0.2, 0.22, 0.3])) < 1e-9
    assert np.linalg.norm(p[13] - np.array([0.2, -0.22, 0.3])) < 1e-9


# ---------------------------------------------------------------------------
# Quaternion utilities


def test_quat_mul_and_rotate_oracles():
    # 90 degrees about z maps x to y
    qz = torch.tensor([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)],
                      dtype=torch.float64)
    v = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    got = quat_rotate_t(qz, v)
    assert torch.allclose(got, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64),
                          atol=1e-12)
    # composing two quarter turns equals a half turn
    q_half = quat_mul_t(qz, qz)
    expect = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64)
    assert torch.allclose(q_half, expect, atol=1e-12)


def test_quat_rotate_matches_matrix_route():
    rng = Rng(4)
    q = rng.torch_normal((10, 4), torch.float64)
    q = q / q.norm(dim=-1, keepdim=True)
    v = rng.torch_normal((10, 3), torch.float64)
    got = quat_rotate_t(q, v).numpy()
    for i in range(10):
        assert np.abs(got[i] - quat_to_matrix(q[i].numpy()) @ v[i].numpy()).max() < 1e-12


def test_canonicalize_sign():
    q = torch.tensor([[-0.5, 0.5, 0.5, 0.5], [0.5, -0.5, 0.5, -0.5]])
    c = canonicalize_sign(q)
    assert torch.all(c[:, 0] >= 0)
    assert torch.equal(c[0], -q[0])
    assert torch.equal(c[1], q[1])


def test_joint_state_check_tolerates_quaternion_sign():
    theta = home_angles(CHAIN)
    p, q = forward_kinematics(CHAIN, theta)
    assert quat_from_numpy_chain_check(CHAIN, theta, p, q)
    assert quat_from_numpy_chain_check(CHAIN, theta, p, -q)
    assert not quat_from_numpy_chain_check(CHAIN, theta, p + 1e-3, q)


# ---------------------------------------------------------------------------
# Serialization


def test_chain_save_load_round_trip(tmp_path):
    path = tmp_path / "chain.json"
    save_chain(CHAIN, path)
    loaded = load_chain(path)
    assert loaded == CHAIN
    assert loaded.digest() == CHAIN.digest()


def test_chain_digest_sensitive_to_geometry():
    base = CHAIN.digest()
    assert len(base) == 16
    joints = list(CHAIN.joints)
    j = joints[2]
    joints[2] = Joint(j.name, j.parent, j.quaternion,
                      (j.translation[0] + 0.01, j.translation[1], j.translation[2]),
                      j.axis, j.limits, j.is_gripper)
    assert KinematicChain(tuple(joints)).digest() != base
    assert dual_arm_chain().digest() == base

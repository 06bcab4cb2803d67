"""Kinematic chains: structure, differentiable forward kinematics, link-hop
graph distances, file I/O, and the built-in dual-arm embodiment.

A chain is a topologically sorted list of joints; each joint's frame is
parent frame * fixed rigid transform * rotation about a fixed axis by its
angle. Gripper joints use a normalized opening in [0, 1] as their "angle" and
otherwise participate in FK like revolute joints. Roots (parent -1) attach to
an implicit base node, which also connects the two arms for hop distances.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import camgeom

STATE_DIM = 8  # per-joint [angle, position xyz, quaternion wxyz]


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int                 # index of parent joint, -1 for base-mounted
    quaternion: tuple           # fixed transform rotation (w, x, y, z)
    translation: tuple          # fixed transform translation, meters
    axis: tuple                 # rotation axis, unit
    limits: tuple               # (lo, hi) radians, or opening range for grippers
    is_gripper: bool = False

    def __post_init__(self):
        ax = np.asarray(self.axis, dtype=np.float64)
        if abs(np.linalg.norm(ax) - 1.0) > 1e-9:
            raise ValueError(f"joint {self.name}: axis must be unit norm")
        q = np.asarray(self.quaternion, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"joint {self.name}: quaternion must be unit norm")
        if self.limits[0] >= self.limits[1]:
            raise ValueError(f"joint {self.name}: empty limit range")


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple

    def __post_init__(self):
        for i, j in enumerate(self.joints):
            if j.parent >= i:
                raise ValueError(f"joint {j.name}: parent index must precede joint")
            if j.parent < -1:
                raise ValueError(f"joint {j.name}: bad parent index")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def gripper_mask(self) -> np.ndarray:
        return np.array([j.is_gripper for j in self.joints], dtype=bool)

    @property
    def lower_limits(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.joints])

    @property
    def upper_limits(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.joints])

    def index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(name)

    def digest(self) -> str:
        doc = json.dumps(_chain_doc(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _chain_doc(chain: KinematicChain) -> dict:
    return {"joints": [{
        "name": j.name, "parent": j.parent,
        "quaternion": list(j.quaternion), "translation": list(j.translation),
        "axis": list(j.axis), "limits": list(j.limits), "is_gripper": j.is_gripper,
    } for j in chain.joints]}


def save_chain(chain: KinematicChain, path) -> None:
    with open(path, "w") as fh:
        json.dump(_chain_doc(chain), fh, indent=2)


def load_chain(path) -> KinematicChain:
    with open(path) as fh:
        doc = json.load(fh)
    joints = tuple(Joint(name=item["name"], parent=item["parent"],
                         quaternion=tuple(item["quaternion"]),
                         translation=tuple(item["translation"]),
                         axis=tuple(item["axis"]), limits=tuple(item["limits"]),
                         is_gripper=item.get("is_gripper", False))
                   for item in doc["joints"])
    return KinematicChain(joints)


def link_hop_distances(chain: KinematicChain) -> np.ndarray:
    """Shortest path length in edges on the undirected kinematic tree.

    Roots are connected through the implicit base node, so hops between the
    two arms go through it (tip-to-tip = depth_left + depth_right).
    """
    n = chain.n_joints
    base = n  # virtual base node
    adj = [[] for _ in range(n + 1)]
    for i, j in enumerate(chain.joints):
        p = base if j.parent == -1 else j.parent
        adj[i].append(p)
        adj[p].append(i)
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        d = np.full(n + 1, -1, dtype=np.int64)
        d[src] = 0
        frontier = [src]
        while frontier:
            nxt = []
            for u in frontier:
                for w in adj[u]:
                    if d[w] < 0:
                        d[w] = d[u] + 1
                        nxt.append(w)
            frontier = nxt
        dist[src] = d[:n]
    return dist


def clamp_to_limits(chain: KinematicChain, theta: np.ndarray,
                    warn: bool = True) -> np.ndarray:
    lo, hi = chain.lower_limits, chain.upper_limits
    clamped = np.clip(theta, lo, hi)
    if warn and not np.allclose(clamped, theta):
        worst = np.max(np.abs(clamped - theta))
        warnings.warn(f"joint angles clamped to limits (max excess {worst:.4f} rad)")
    return clamped


def forward_kinematics(chain: KinematicChain, theta: np.ndarray):
    """FK with limit clamping (+warning): (..., N_j) -> p (..., N_j, 3), q (..., N_j, 4).

    The training-graph variant lives in TorchChain.fk (differentiable, no
    clamping so gradients are exact on noisy/predicted angles).
    """
    theta = clamp_to_limits(chain, np.asarray(theta, dtype=np.float64))
    tc = TorchChain(chain, dtype=torch.float64)
    p, q = tc.fk(torch.from_numpy(theta))
    return p.numpy(), q.numpy()


def quat_mul_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_rotate_t(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotate vectors v (..., 3) by unit quaternions q (..., 4)."""
    w = q[..., :1]
    u = q[..., 1:]
    uv = torch.cross(u, v, dim=-1)
    uuv = torch.cross(u, uv, dim=-1)
    return v + 2.0 * (w * uv + uuv)


class TorchChain:
    """Chain constants as torch tensors with differentiable batched FK."""

    def __init__(self, chain: KinematicChain, dtype: torch.dtype = torch.float32):
        self.chain = chain
        self.dtype = dtype
        self.parents = [j.parent for j in chain.joints]
        self.q_fixed = torch.tensor([j.quaternion for j in chain.joints], dtype=dtype)
        self.t_fixed = torch.tensor([j.translation for j in chain.joints], dtype=dtype)
        self.axes = torch.tensor([j.axis for j in chain.joints], dtype=dtype)
        self.gripper = torch.from_numpy(chain.gripper_mask)

    def to(self, dtype: torch.dtype) -> "TorchChain":
        return TorchChain(self.chain, dtype=dtype)

    def fk(self, theta: torch.Tensor):
        """theta: (..., N_j) -> positions (..., N_j, 3), quaternions (..., N_j, 4).

        Quaternions are continuous in theta (no sign canonicalization), so
        diffusion targets and FK recomputation stay smooth along a trajectory.
        """
        theta = theta.to(self.dtype)
        half = 0.5 * theta
        cos_h, sin_h = torch.cos(half), torch.sin(half)
        lead = theta.shape[:-1]
        ps, qs = [], []
        for idx in range(len(self.parents)):
            q_rot = torch.cat([cos_h[..., idx:idx + 1],
                               sin_h[..., idx:idx + 1] * self.axes[idx]], dim=-1)
            parent = self.parents[idx]
            if parent == -1:
                p_par = torch.zeros(*lead, 3, dtype=self.dtype)
                q_par = torch.zeros(*lead, 4, dtype=self.dtype)
                q_par[..., 0] = 1.0
            else:
                p_par, q_par = ps[parent], qs[parent]
            p = p_par + quat_rotate_t(q_par, self.t_fixed[idx].expand(*lead, 3))
            q = quat_mul_t(quat_mul_t(q_par, self.q_fixed[idx].expand(*lead, 4)), q_rot)
            ps.append(p)
            qs.append(q)
        return torch.stack(ps, dim=-2), torch.stack(qs, dim=-2)

    def joint_state(self, theta: torch.Tensor) -> torch.Tensor:
        """(..., N_j) angles -> (..., N_j, 8) [angle, position, quaternion]."""
        p, q = self.fk(theta)
        return torch.cat([theta.to(self.dtype)[..., None], p, q], dim=-1)


# ---------------------------------------------------------------------------
# Built-in dual-arm embodiment: two 6-DoF arms + 1 gripper channel each.

UPPER_ARM = 0.25
FOREARM = 0.22
WRIST_LINKS = (0.03, 0.02, 0.03)   # wrist_pitch->roll->yaw->gripper offsets
SHOULDER = (0.0, 0.18, 0.12)       # left shoulder; right mirrors y
DISTAL = FOREARM + sum(WRIST_LINKS)  # elbow-to-gripper length at zero wrist angles
PITCH_LIMIT = math.pi / 2          # shoulder pitch range, shared with ik_reach
ELBOW_LIMIT = 2.6

_ID_Q = (1.0, 0.0, 0.0, 0.0)


def _arm(side: str, base_index: int, y_sign: float) -> list:
    pi = math.pi
    shoulder = (SHOULDER[0], y_sign * SHOULDER[1], SHOULDER[2])

    def j(name, parent_off, t, axis, limits, grip=False):
        return Joint(f"{side}_{name}",
                     -1 if parent_off is None else base_index + parent_off,
                     _ID_Q, t, axis, limits, grip)

    return [
        j("shoulder_yaw", None, shoulder, (0, 0, 1), (-pi, pi)),
        j("shoulder_pitch", 0, (0.0, 0.0, 0.0), (0, 1, 0),
          (-PITCH_LIMIT, PITCH_LIMIT)),
        j("elbow_pitch", 1, (UPPER_ARM, 0.0, 0.0), (0, 1, 0),
          (-ELBOW_LIMIT, ELBOW_LIMIT)),
        j("wrist_pitch", 2, (FOREARM, 0.0, 0.0), (0, 1, 0), (-pi / 2, pi / 2)),
        j("wrist_roll", 3, (WRIST_LINKS[0], 0.0, 0.0), (1, 0, 0), (-pi, pi)),
        j("wrist_yaw", 4, (WRIST_LINKS[1], 0.0, 0.0), (0, 0, 1), (-pi, pi)),
        j("gripper", 5, (WRIST_LINKS[2], 0.0, 0.0), (1, 0, 0), (0.0, 1.0), True),
    ]


def dual_arm_chain() -> KinematicChain:
    joints = _arm("left", 0, +1.0) + _arm("right", 7, -1.0)
    return KinematicChain(tuple(joints))


def gripper_indices(chain: KinematicChain) -> dict:
    out = {}
    for i, j in enumerate(chain.joints):
        if j.is_gripper:
            side = j.name.split("_")[0]
            out[side] = i
    return out


def ik_reach(target: np.ndarray, side: str) -> np.ndarray:
    """Closed-form IK for the built-in arm: 7 angles placing the gripper
    origin at `target` (base frame), wrist angles zero, gripper open.

    Prefers the elbow-down branch and falls back to elbow-up when that is the
    only branch keeping the shoulder pitch inside its limit. Raises ValueError
    when the target is outside the annular workspace or no branch satisfies
    the joint limits.
    """
    y_sign = 1.0 if side == "left" else -1.0
    shoulder = np.array([SHOULDER[0], y_sign * SHOULDER[1], SHOULDER[2]])
    v = np.asarray(target, dtype=np.float64) - shoulder
    rho = math.hypot(v[0], v[1])
    zeta = v[2]
    yaw = math.atan2(v[1], v[0])
    l1, l2 = UPPER_ARM, DISTAL
    reach_sq = rho * rho + zeta * zeta
    cos_elbow = (reach_sq - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    if not (-0.999 <= cos_elbow <= 0.999):
        raise ValueError(f"target {target} out of reach for {side} arm")
    elbow = math.acos(cos_elbow)
    if elbow > ELBOW_LIMIT:
        raise ValueError(f"target {target} needs elbow past its limit "
                         f"for {side} arm")

    # Planar 2-link in (rho, -zeta): positive pitch rotates the arm downward.
    def pitch_for(e):
        return math.atan2(-zeta, rho) - math.atan2(l2 * math.sin(e),
                                                   l1 + l2 * math.cos(e))

    a = pitch_for(elbow)  # elbow-down branch
    if not -PITCH_LIMIT <= a <= PITCH_LIMIT:
        elbow = -elbow    # elbow-up keeps the shoulder pitch in range instead
        a = pitch_for(elbow)
    if not -PITCH_LIMIT <= a <= PITCH_LIMIT:
        raise ValueError(f"target {target} violates the shoulder pitch limit "
                         f"for {side} arm")
    return np.array([yaw, a, elbow, 0.0, 0.0, 0.0, 1.0])


def reachable(target: np.ndarray, side: str) -> bool:
    try:
        ik_reach(target, side)
        return True
    except ValueError:
        return False


def arm_slice(side: str) -> slice:
    return slice(0, 7) if side == "left" else slice(7, 14)


def canonicalize_sign(q: torch.Tensor) -> torch.Tensor:
    """Flip quaternion sign so w >= 0 (double-cover canonical form)."""
    sign = torch.where(q[..., :1] >= 0, 1.0, -1.0).to(q.dtype)
    return q * sign


def quat_from_numpy_chain_check(chain: KinematicChain, theta: np.ndarray,
                                p: np.ndarray, q: np.ndarray, tol: float = 1e-6) -> bool:
    """True when (p, q) equal FK(chain, theta) within tol (JointState invariant)."""
    p_ref, q_ref = forward_kinematics(chain, theta)
    dq = np.minimum(np.abs(q_ref - q).max(axis=-1), np.abs(q_ref + q).max(axis=-1))
    return bool(np.abs(p_ref - p).max() < tol and dq.max() < tol)


def home_angles(chain: KinematicChain) -> np.ndarray:
    """Rest pose: both grippers raised above the table, clear of targets."""
    theta = np.zeros(chain.n_joints)
    for side in ("left", "right"):
        y = 0.22 if side == "left" else -0.22
        theta[arm_slice(side)] = ik_reach(np.array([0.2, y, 0.3]), side)
    return theta

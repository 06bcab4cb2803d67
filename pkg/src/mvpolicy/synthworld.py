"""Deterministic synthetic multi-camera RGB-D world.

Analytic ray-cast rendering of primitive tabletop scenes (depth = camera-frame
z, 0 = no hit), commodity-sensor depth corruption (noise, elliptical holes,
edge dropout), a smooth-noise teacher depth, scripted minimum-jerk reach
demonstrations on the built-in dual-arm chain, and exact geometric oracles
(per-token true depths, cross-view correspondences) used to verify the fusion
stack. Every generator is a pure function of (spec, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import camgeom
from .camgeom import (CameraView, DepthBinSpec, Extrinsics, Intrinsics, Rig,
                      VIEW_NAMES, bin_centers, level_grids, look_at,
                      pixel_rays, token_centers)
from .config import CameraConfig, WorldConfig
from .kinematics import (KinematicChain, arm_slice, gripper_indices,
                         home_angles, ik_reach, reachable)
from .numcore import Rng

PALETTE = {
    "table": (0.55, 0.55, 0.55),
    "red": (0.85, 0.12, 0.10),
    "blue": (0.10, 0.25, 0.85),
    "gray": (0.40, 0.40, 0.42),
}
BACKGROUND = 0.5
LIGHT_DIR = np.array([0.3, -0.2, 1.0]) / math.sqrt(0.3 ** 2 + 0.2 ** 2 + 1.0)
AMBIENT = 0.35

# Tabletop extents (meters, base frame): x forward from the robot, z up.
TABLE_X = (0.05, 0.75)
TABLE_Y = (-0.45, 0.45)
TABLE_Z = (-0.02, 0.0)

FAMILIES = ("reach-left", "reach-right", "reach-both", "reach-left-color",
            "reach-left-occluded")

# Demonstration phases (steps): hold home, minimum-jerk move, hold target.
PRE_HOLD = 8
MOVE_STEPS = 64
GRIP_STEPS = 16

# Fixed layout constants for the two-slot color family and the occluded family.
COLOR_SLOTS = ((0.35, 0.30, 0.04), (0.35, 0.14, 0.04))
OCCLUDER_CENTER = (0.14, 0.1625, 0.13)
OCCLUDER_HALF = (0.03, 0.10, 0.15)


@dataclass(frozen=True)
class Primitive:
    kind: str                      # "sphere" | "box" | "plane"
    color: str
    center: tuple = (0.0, 0.0, 0.0)   # sphere/box center; a point on the plane
    radius: float = 0.0
    half_extents: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "plane"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.color not in PALETTE:
            raise ValueError(f"unknown color {self.color!r}")


@dataclass(frozen=True)
class Scene:
    primitives: tuple

    def spheres(self, color=None):
        return [p for p in self.primitives
                if p.kind == "sphere" and (color is None or p.color == color)]


def make_table() -> Primitive:
    cx = (TABLE_X[0] + TABLE_X[1]) / 2
    cy = (TABLE_Y[0] + TABLE_Y[1]) / 2
    cz = (TABLE_Z[0] + TABLE_Z[1]) / 2
    hx = (TABLE_X[1] - TABLE_X[0]) / 2
    hy = (TABLE_Y[1] - TABLE_Y[0]) / 2
    hz = (TABLE_Z[1] - TABLE_Z[0]) / 2
    return Primitive("box", "table", (cx, cy, cz), half_extents=(hx, hy, hz))


def scene_to_dict(scene: Scene) -> dict:
    return {"primitives": [{
        "kind": p.kind, "color": p.color, "center": list(p.center),
        "radius": p.radius, "half_extents": list(p.half_extents),
        "normal": list(p.normal)} for p in scene.primitives]}


def scene_from_dict(doc: dict) -> Scene:
    prims = tuple(Primitive(d["kind"], d["color"], tuple(d["center"]),
                            d["radius"], tuple(d["half_extents"]),
                            tuple(d["normal"]))
                  for d in doc["primitives"])
    return Scene(prims)


# ---------------------------------------------------------------------------
# Ray casting

_NO_HIT = np.inf
_EPS = 1e-9


def _hit_sphere(origins, dirs, prim: Primitive) -> np.ndarray:
    oc = origins - np.asarray(prim.center)
    a = (dirs * dirs).sum(-1)
    b = 2.0 * (dirs * oc).sum(-1)
    c = (oc * oc).sum(-1) - prim.radius ** 2
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > _EPS, t0, t1)
    return np.where(hit & (t > _EPS), t, _NO_HIT)


def _hit_box(origins, dirs, prim: Primitive) -> np.ndarray:
    center = np.asarray(prim.center)
    half = np.asarray(prim.half_extents)
    parallel = np.abs(dirs) <= _EPS
    inv = 1.0 / np.where(parallel, 1.0, dirs)
    lo = (center - half - origins) * inv
    hi = (center + half - origins) * inv
    # Parallel rays: inside the slab -> (-inf, inf), outside -> no overlap.
    inside = np.abs(origins - center) <= half
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    tmin = np.minimum(lo, hi).max(-1)
    tmax = np.maximum(lo, hi).min(-1)
    hit = (tmax >= np.maximum(tmin, _EPS))
    t = np.where(tmin > _EPS, tmin, tmax)
    return np.where(hit & (t > _EPS), t, _NO_HIT)


def _hit_plane(origins, dirs, prim: Primitive) -> np.ndarray:
    n = np.asarray(prim.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    denom = dirs @ n
    offset = (np.asarray(prim.center) @ n - origins @ n)
    t = np.where(np.abs(denom) > _EPS, offset / np.where(
        np.abs(denom) > _EPS, denom, 1.0), _NO_HIT)
    return np.where(t > _EPS, t, _NO_HIT)


_HIT_FNS = {"sphere": _hit_sphere, "box": _hit_box, "plane": _hit_plane}


def ray_cast(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest intersection along each ray.

    origins/dirs: (..., 3); origins broadcast against dirs. Returns
    (t (...,), primitive index (...,) with -1 = miss). The ray parameter t is
    in units of |dirs|; with unit-camera-z rays it equals camera depth.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    best_t = np.full(dirs.shape[:-1], _NO_HIT)
    best_i = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t = _HIT_FNS[prim.kind](origins, dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    return best_t, best_i


def surface_normal(prim: Primitive, points: np.ndarray) -> np.ndarray:
    if prim.kind == "sphere":
        n = points - np.asarray(prim.center)
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), _EPS)
    if prim.kind == "plane":
        n = np.asarray(prim.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return np.broadcast_to(n, points.shape).copy()
    rel = (points - np.asarray(prim.center)) / np.asarray(prim.half_extents)
    axis = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(points)
    np.put_along_axis(n, axis[..., None], np.sign(
        np.take_along_axis(rel, axis[..., None], axis=-1)), axis=-1)
    return n


# ---------------------------------------------------------------------------
# Rendering

def render_depth(scene: Scene, view: CameraView) -> np.ndarray:
    """Clean camera-frame z depth (H, W) float32; 0 marks no hit."""
    intr = view.intrinsics
    rays = _view_rays(view)
    t, _ = ray_cast(scene, _view_origin(view), rays)
    depth = np.where(np.isfinite(t), t, 0.0)
    return depth.reshape(intr.height, intr.width).astype(np.float32)


def render_rgb(scene: Scene, view: CameraView) -> np.ndarray:
    """Flat-color Lambert render (H, W, 3) uint8 with gray background."""
    intr = view.intrinsics
    rays = _view_rays(view)
    origin = _view_origin(view)
    t, idx = ray_cast(scene, origin, rays)
    img = np.full((rays.shape[0], 3), BACKGROUND)
    hit_any = idx >= 0
    points = origin + rays * np.where(hit_any, t, 0.0)[:, None]
    for i, prim in enumerate(scene.primitives):
        m = idx == i
        if not m.any():
            continue
        n = surface_normal(prim, points[m])
        facing = (n * rays[m]).sum(-1) > 0
        n[facing] *= -1.0
        shade = AMBIENT + (1 - AMBIENT) * np.maximum(n @ LIGHT_DIR, 0.0)
        img[m] = np.asarray(PALETTE[prim.color]) * shade[:, None]
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img.reshape(intr.height, intr.width, 3)


def _view_rays(view: CameraView) -> np.ndarray:
    intr = view.intrinsics
    uu, vv = np.meshgrid(np.arange(intr.width) + 0.5,
                         np.arange(intr.height) + 0.5)
    pix = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)
    cam_rays = pixel_rays(intr, pix)
    return cam_rays @ view.extrinsics.rotation_matrix().T


def _view_origin(view: CameraView) -> np.ndarray:
    return view.extrinsics.translation_vector()


# ---------------------------------------------------------------------------
# Sensor models

def corrupt_depth(clean: np.ndarray, rng: Rng, cfg: WorldConfig) -> np.ndarray:
    """Commodity-sensor model: Gaussian noise, elliptical holes, edge dropout.

    Invalid (0) input pixels stay invalid. hole_rate >= 1 blanks the frame.
    """
    h, w = clean.shape
    if cfg.hole_rate >= 1.0:
        return np.zeros_like(clean)
    valid = clean > 0
    raw = clean.astype(np.float64)
    if cfg.raw_sigma > 0:
        raw = raw + cfg.raw_sigma * rng.normal(size=clean.shape)
    raw[~valid] = 0.0
    # Elliptical holes; axes 2..6 px, count scaled by rate over mean area.
    mean_area = math.pi * 16.0
    n_holes = math.ceil(cfg.hole_rate * h * w / mean_area)
    for _ in range(n_holes):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(2, 6, size=2)
        y0, y1 = max(0, int(cy - ry)), min(h, int(cy + ry) + 2)
        x0, x1 = max(0, int(cx - rx)), min(w, int(cx + rx) + 2)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask = (((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2) <= 1
        raw[y0:y1, x0:x1][mask] = 0.0
    # Edge dropout: pixels near a >5 cm discontinuity of the clean map.
    if cfg.edge_band_px > 0:
        edge = np.zeros((h, w), dtype=bool)
        jump_x = np.abs(np.diff(clean, axis=1)) > 0.05
        jump_y = np.abs(np.diff(clean, axis=0)) > 0.05
        edge[:, 1:] |= jump_x
        edge[:, :-1] |= jump_x
        edge[1:, :] |= jump_y
        edge[:-1, :] |= jump_y
        band = ndimage.binary_dilation(edge, iterations=cfg.edge_band_px)
        drop = band & (rng.uniform(size=(h, w)) < 0.5)
        raw[drop] = 0.0
    raw[raw <= 0] = 0.0
    return raw.astype(np.float32)


def teacher_depth(clean: np.ndarray, rng: Rng, sigma: float) -> np.ndarray:
    """Clean depth plus a smooth zero-mean field with std exactly `sigma`.

    The field is standard normal on a stride-8 coarse grid, bilinearly
    upsampled, then standardized, so the teacher is strictly cleaner than the
    raw sensor but not a perfect oracle.
    """
    h, w = clean.shape
    if h % 8 or w % 8:
        raise ValueError("teacher field needs extents divisible by 8")
    coarse = rng.normal(size=(h // 8, w // 8))
    fld = ndimage.zoom(coarse, 8, order=1, mode="nearest", grid_mode=True)
    fld = (fld - fld.mean()) / max(fld.std(), 1e-12) * sigma
    out = clean.astype(np.float64) + fld
    out[clean <= 0] = 0.0
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Default rig

_RIG_POSES = {
    "front": ((0.85, 0.0, 0.4), (0.35, 0.0, 0.0)),
    "head": ((-0.25, 0.0, 0.6), (0.35, 0.0, 0.0)),
    "left_wrist": ((0.45, 0.45, 0.35), (0.35, 0.0, 0.02)),
    "right_wrist": ((0.45, -0.45, 0.35), (0.35, 0.0, 0.02)),
}


def default_rig(cam: CameraConfig, narrow_fov: bool = False) -> Rig:
    """Four-camera rig around the tabletop; narrow_fov doubles focal length."""
    scale = 1.6 if narrow_fov else 0.8
    f = scale * cam.width
    intr = Intrinsics(fx=f, fy=f, cx=cam.width / 2, cy=cam.height / 2,
                      width=cam.width, height=cam.height)
    views = [CameraView(name, intr, look_at(*_RIG_POSES[name]))
             for name in VIEW_NAMES]
    return Rig(tuple(views))


# ---------------------------------------------------------------------------
# Scene families

def _sample_on_table(rng: Rng, x_range, y_range, radius: float) -> np.ndarray:
    x = rng.uniform(*x_range)
    y = rng.uniform(*y_range)
    return np.array([x, y, TABLE_Z[1] + radius])


def sample_scene(family: str, rng: Rng, cfg: WorldConfig):
    """-> (Scene, targets {side: center or None}, instruction)."""
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}; "
                         f"expected one of {FAMILIES}")
    r = cfg.target_radius
    prims = [make_table()]
    targets = {"left": None, "right": None}
    for _ in range(64):
        if family == "reach-left":
            c = _sample_on_table(rng, (0.30, 0.42), (0.15, 0.35), r)
            if not reachable(c, "left"):
                continue
            prims.append(Primitive("sphere", "red", tuple(c), radius=r))
            targets["left"] = c
            instruction = "reach the red sphere with the left arm"
        elif family == "reach-right":
            c = _sample_on_table(rng, (0.30, 0.42), (-0.35, -0.15), r)
            if not reachable(c, "right"):
                continue
            prims.append(Primitive("sphere", "red", tuple(c), radius=r))
            targets["right"] = c
            instruction = "reach the red sphere with the right arm"
        elif family == "reach-both":
            cl = _sample_on_table(rng, (0.30, 0.42), (0.15, 0.35), r)
            cr = _sample_on_table(rng, (0.30, 0.42), (-0.35, -0.15), r)
            if not (reachable(cl, "left") and reachable(cr, "right")):
                continue
            prims.append(Primitive("sphere", "red", tuple(cl), radius=r))
            prims.append(Primitive("sphere", "blue", tuple(cr), radius=r))
            targets["left"], targets["right"] = cl, cr
            instruction = ("reach the red sphere with the left arm and the "
                           "blue sphere with the right arm")
        elif family == "reach-left-color":
            # Fixed slots; the colors and the instructed color are sampled,
            # so only the instruction disambiguates the goal geometry.
            order = rng.permutation(2)
            colors = [("red", "blue")[i] for i in order]
            want = ("red", "blue")[rng.integers(0, 2)]
            slots = [np.array(s) for s in COLOR_SLOTS]
            for slot, color in zip(slots, colors):
                prims.append(Primitive("sphere", color, tuple(slot), radius=r))
            tgt = slots[colors.index(want)]
            if not reachable(tgt, "left"):
                continue
            targets["left"] = tgt
            instruction = f"reach the {want} sphere with the left arm"
        else:  # reach-left-occluded
            c = _sample_on_table(rng, (0.34, 0.36), (0.15, 0.35), r)
            if not reachable(c, "left"):
                continue
            prims.append(Primitive("sphere", "red", tuple(c), radius=r))
            prims.append(Primitive("box", "gray", OCCLUDER_CENTER,
                                   half_extents=OCCLUDER_HALF))
            targets["left"] = c
            instruction = "reach the red sphere with the left arm"
        return Scene(tuple(prims)), targets, instruction
    raise RuntimeError(f"could not sample a reachable {family} scene")


# ---------------------------------------------------------------------------
# Demonstrations

def min_jerk(tau: np.ndarray) -> np.ndarray:
    """Minimum-jerk position profile: s(0)=0, s(1)=1, zero end velocities."""
    tau = np.clip(tau, 0.0, 1.0)
    return tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)


def toy_trajectory(chain: KinematicChain, targets: dict, length: int) -> np.ndarray:
    """(length, N_j) angles: hold home, minimum-jerk reach, close, hold."""
    if length < PRE_HOLD + MOVE_STEPS + 8:
        raise ValueError(f"episode length {length} too short for the "
                         f"{PRE_HOLD}+{MOVE_STEPS} step profile")
    home = home_angles(chain)
    traj = np.tile(home, (length, 1))
    t = np.arange(length)
    s = min_jerk((t - PRE_HOLD) / (MOVE_STEPS - 1))
    grip_start = PRE_HOLD + MOVE_STEPS - GRIP_STEPS
    g = 1.0 - min_jerk((t - grip_start) / (GRIP_STEPS - 1))
    grip = gripper_indices(chain)
    for side, target in targets.items():
        if target is None:
            continue
        sl = arm_slice(side)
        goal = ik_reach(target, side)
        traj[:, sl] = home[None, sl] + s[:, None] * (goal - home[sl])[None, :]
        traj[:, grip[side]] = g
    return traj


@dataclass
class EpisodeRecord:
    """One scripted demonstration plus its static multi-view observation."""

    family: str
    instruction: str
    seed: tuple                    # SeedSequence entropy; regenerates the episode
    scene: Scene
    targets: dict                  # side -> (3,) ndarray or None
    angles: np.ndarray             # (T, N_j) float32
    rgb: np.ndarray                # (V, H, W, 3) uint8
    raw_depth: np.ndarray          # (V, H, W) float32
    teacher_depth: np.ndarray      # (V, H, W) float32
    clean_depth: np.ndarray = field(repr=False, default=None)  # oracle only

    @property
    def length(self) -> int:
        return self.angles.shape[0]


def generate_episode(chain: KinematicChain, rig: Rig, cfg: WorldConfig,
                     family: str, entropy) -> EpisodeRecord:
    """Pure function of (chain, rig, config, family, seed entropy)."""
    entropy = tuple(int(e) for e in entropy)
    root = Rng(np.random.SeedSequence(entropy))
    scene_rng, teacher_rng, corrupt_rng = root.split(3)
    scene, targets, instruction = sample_scene(family, scene_rng, cfg)
    rgb, raw, teacher, clean = [], [], [], []
    for view in rig.views:
        c = render_depth(scene, view)
        rgb.append(render_rgb(scene, view))
        clean.append(c)
        teacher.append(teacher_depth(c, teacher_rng, cfg.teacher_sigma))
        raw.append(corrupt_depth(c, corrupt_rng, cfg))
    angles = toy_trajectory(chain, targets, cfg.episode_len).astype(np.float32)
    return EpisodeRecord(
        family=family, instruction=instruction, seed=entropy, scene=scene,
        targets=targets, angles=angles, rgb=np.stack(rgb),
        raw_depth=np.stack(raw), teacher_depth=np.stack(teacher),
        clean_depth=np.stack(clean))


def gen_toy_trajectories(chain: KinematicChain, rig: Rig, cfg: WorldConfig,
                         family: str, count: int, seed: int) -> list:
    """`count` deterministic episodes of one family under a master seed."""
    fam_id = FAMILIES.index(family)
    return [generate_episode(chain, rig, cfg, family, (seed, fam_id, i))
            for i in range(count)]


def rebuild_scene(family: str, entropy, cfg: WorldConfig):
    """Recover (scene, targets, instruction) from an episode's seed entropy.

    Mirrors generate_episode's stream layout, so the scene of any recorded
    episode can be reconstructed from its manifest entry alone.
    """
    entropy = tuple(int(e) for e in entropy)
    scene_rng = Rng(np.random.SeedSequence(entropy)).split(3)[0]
    return sample_scene(family, scene_rng, cfg)


# ---------------------------------------------------------------------------
# Oracles

@dataclass(frozen=True)
class CorrespondencePair:
    view_a: int
    token_a: int
    view_b: int
    token_b: int
    point: tuple        # shared surface point (base frame)
    visible: tuple = (True, True)


def oracle_token_depths(scene: Scene, rig: Rig, width: int, height: int,
                        strides=camgeom.DEFAULT_STRIDES):
    """Exact per-token depths via fresh rays through token centers.

    Returns (depths (V, N), points (V, N, 3), valid (V, N)).
    """
    centers, _ = camgeom.all_token_centers(width, height, strides)
    depths, points, valid = [], [], []
    for view in rig.views:
        rays = pixel_rays(view.intrinsics, centers)
        rays = rays @ view.extrinsics.rotation_matrix().T
        origin = _view_origin(view)
        t, _ = ray_cast(scene, origin, rays)
        ok = np.isfinite(t)
        d = np.where(ok, t, 0.0)
        depths.append(d)
        points.append(origin + rays * d[:, None])
        valid.append(ok)
    return np.stack(depths), np.stack(points), np.stack(valid)


def oracle_depth_probs(depths: np.ndarray, valid: np.ndarray,
                       spec: DepthBinSpec) -> np.ndarray:
    """One-hot nearest-bin distributions from true depths; uniform if invalid."""
    centers = bin_centers(spec)
    idx = np.clip(np.round((depths - centers[0]) / spec.bin_width).astype(np.int64),
                  0, spec.num_bins - 1)
    probs = np.zeros(depths.shape + (spec.num_bins,), dtype=np.float64)
    np.put_along_axis(probs, idx[..., None], 1.0, axis=-1)
    probs[~valid] = 1.0 / spec.num_bins
    return probs


def _occluded(scene: Scene, origin: np.ndarray, point: np.ndarray,
              cam_depth: float, tol: float = 0.01) -> bool:
    ray = (point - origin) / cam_depth   # unit camera z along this pixel
    t, _ = ray_cast(scene, origin[None, :], ray[None, :])
    return not (np.isfinite(t[0]) and abs(t[0] - cam_depth) < tol)


def ground_truth_correspondences(scene: Scene, rig: Rig, width: int,
                                 height: int,
                                 strides=camgeom.DEFAULT_STRIDES) -> list:
    """Mutual same-level cross-view token correspondences.

    A pair (a, i, b, j) is emitted when token i's center ray (view a) hits a
    surface point that projects unoccluded into token j's window of view b at
    the same pyramid level, *and* token j's surface point symmetrically lands
    in token i's window; both directions share token i's surface point record.
    """
    grids = level_grids(width, height, strides)
    depths, points, valid = oracle_token_depths(scene, rig, width, height,
                                                strides)
    level_of, offsets = [], []
    off = 0
    for lv, (h, w) in enumerate(grids):
        level_of += [lv] * (h * w)
        offsets.append(off)
        off += h * w
    level_of = np.array(level_of)

    def window_token(view_idx: int, point: np.ndarray, level: int):
        """Token index of `point`'s projection in `view` at `level`, or None."""
        view = rig.views[view_idx]
        uv, z, ok = camgeom.project_many(view.intrinsics, view.extrinsics,
                                         point[None])
        if not ok[0]:
            return None
        s = strides[level]
        gh, gw = grids[level]
        col, row = int(uv[0, 0] // s), int(uv[0, 1] // s)
        if not (0 <= row < gh and 0 <= col < gw):
            return None
        if _occluded(scene, _view_origin(view), point, float(z[0])):
            return None
        return offsets[level] + row * gw + col

    num_views = len(rig.views)
    directed = set()
    for a in range(num_views):
        for i in np.flatnonzero(valid[a]):
            lv = level_of[i]
            for b in range(num_views):
                if b == a:
                    continue
                j = window_token(b, points[a, i], lv)
                if j is not None:
                    directed.add((a, int(i), b, int(j)))
    pairs = []
    for (a, i, b, j) in sorted(directed):
        if (b, j, a, i) in directed:
            pairs.append(CorrespondencePair(a, i, b, j,
                                            tuple(points[a, i].tolist())))
    return pairs

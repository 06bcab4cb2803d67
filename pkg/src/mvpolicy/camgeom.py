"""Pinhole camera geometry: intrinsics/extrinsics, depth bins, token centers,
backprojection/projection, and the calibration-preserving image remap.

Conventions used throughout the package:
  * camera frame: x right, y down, z forward; "depth" is camera-frame z, not
    ray length;
  * continuous image coordinate u in [0, W]: pixel column j covers [j, j+1)
    and has its center at j + 0.5 (same for rows/v);
  * quaternions are (w, x, y, z), unit norm, camera-to-base;
  * invalid depth is encoded as 0.0 m everywhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

VIEW_NAMES = ("front", "head", "left_wrist", "right_wrist")
DEFAULT_STRIDES = (8, 16, 32, 64)
INVALID_DEPTH = 0.0


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class Extrinsics:
    """Camera-to-base rigid transform: rotation quaternion (w,x,y,z) + translation."""

    quaternion: tuple
    translation: tuple

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError("quaternion must have 4 components")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("quaternion must be unit norm")
        if np.asarray(self.translation, dtype=np.float64).shape != (3,):
            raise ValueError("translation must have 3 components")

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(np.asarray(self.quaternion, dtype=np.float64))

    def translation_vector(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)

    @staticmethod
    def identity() -> "Extrinsics":
        return Extrinsics((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))


@dataclass(frozen=True)
class DepthBinSpec:
    num_bins: int
    d_min: float
    d_max: float
    spacing: str = "linear"

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("need at least 2 depth bins")
        if not (0 < self.d_min < self.d_max):
            raise ValueError("require 0 < d_min < d_max")
        if self.spacing != "linear":
            raise ValueError("only linear spacing is supported")

    @property
    def bin_width(self) -> float:
        return (self.d_max - self.d_min) / self.num_bins


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion with w >= 0."""
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def bin_centers(spec: DepthBinSpec) -> np.ndarray:
    """Half-offset linear bin centers: d_i = d_min + (i + 0.5) * width."""
    i = np.arange(spec.num_bins, dtype=np.float64)
    return spec.d_min + (i + 0.5) * spec.bin_width


def pixel_rays(intr: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    """Camera-frame ray directions with unit z for continuous pixel coords (..., 2)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    x = (pixels[..., 0] - intr.cx) / intr.fx
    y = (pixels[..., 1] - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def backproject(intr: Intrinsics, extr: Extrinsics, pixel, depth) -> np.ndarray:
    """Lift pixel coords at camera-frame depth z into the base frame.

    Broadcasts: `pixel` is (..., 2), `depth` is (...) or scalar; the result is
    (..., 3). Raises on non-positive depth.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    rays = pixel_rays(intr, pixel)
    cam_pts = rays * depth[..., None]
    rot = extr.rotation_matrix()
    return cam_pts @ rot.T + extr.translation_vector()


def project(intr: Intrinsics, extr: Extrinsics, point: np.ndarray):
    """Project a base-frame point; returns (u, v, depth) or None if behind camera."""
    uv, z, valid = project_many(intr, extr, np.asarray(point, dtype=np.float64)[None])
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def project_many(intr: Intrinsics, extr: Extrinsics, points: np.ndarray):
    """Vectorized projection: (..., 3) base-frame points -> (uv, z, valid)."""
    rot = extr.rotation_matrix()
    cam = (points - extr.translation_vector()) @ rot
    z = cam[..., 2]
    valid = z > 0
    safe_z = np.where(valid, z, 1.0)
    u = cam[..., 0] / safe_z * intr.fx + intr.cx
    v = cam[..., 1] / safe_z * intr.fy + intr.cy
    return np.stack([u, v], axis=-1), z, valid


def token_centers(level_stride: int, grid: tuple) -> np.ndarray:
    """Row-major pixel centers of a token grid: token (r, c) -> ((c+.5)s, (r+.5)s)."""
    h, w = grid
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    u = (cc.reshape(-1) + 0.5) * level_stride
    v = (rr.reshape(-1) + 0.5) * level_stride
    return np.stack([u, v], axis=-1).astype(np.float64)


def level_grids(width: int, height: int, strides=DEFAULT_STRIDES) -> list:
    """Token grid (h_l, w_l) per pyramid level; floor division keeps centers in-bounds."""
    grids = []
    for s in strides:
        h, w = height // s, width // s
        if h < 1 or w < 1:
            raise ValueError(f"image {width}x{height} too small for stride {s}")
        grids.append((h, w))
    return grids


def all_token_centers(width: int, height: int, strides=DEFAULT_STRIDES):
    """Concatenated centers + per-token stride over all levels, finest first."""
    centers, stride_ids = [], []
    for s, grid in zip(strides, level_grids(width, height, strides)):
        c = token_centers(s, grid)
        centers.append(c)
        stride_ids.append(np.full(len(c), s, dtype=np.int64))
    return np.concatenate(centers, axis=0), np.concatenate(stride_ids, axis=0)


def remap_image(src: np.ndarray, src_intr: Intrinsics, dst_intr: Intrinsics,
                mode: str = "bilinear") -> np.ndarray:
    """Resample an image onto new intrinsics so pixel->ray geometry is preserved.

    Destination pixel centers are mapped through the two pinhole models; RGB
    uses bilinear interpolation with edge clamping, depth must use
    nearest-neighbor with out-of-bounds mapped to the invalid sentinel (0.0)
    to avoid fabricating surfaces across discontinuities.
    """
    if mode not in ("bilinear", "nearest"):
        raise ValueError("mode must be 'bilinear' or 'nearest'")
    src = np.asarray(src)
    if src.shape[0] != src_intr.height or src.shape[1] != src_intr.width:
        raise ValueError("source image extents do not match source intrinsics")
    w_d, h_d = dst_intr.width, dst_intr.height
    u_d = np.arange(w_d, dtype=np.float64) + 0.5
    v_d = np.arange(h_d, dtype=np.float64) + 0.5
    u_s = src_intr.fx * (u_d - dst_intr.cx) / dst_intr.fx + src_intr.cx
    v_s = src_intr.fy * (v_d - dst_intr.cy) / dst_intr.fy + src_intr.cy
    uu = np.broadcast_to(u_s[None, :], (h_d, w_d))
    vv = np.broadcast_to(v_s[:, None], (h_d, w_d))

    if mode == "nearest":
        j = np.floor(uu).astype(np.int64)
        i = np.floor(vv).astype(np.int64)
        inside = (j >= 0) & (j < src_intr.width) & (i >= 0) & (i < src_intr.height)
        jc = np.clip(j, 0, src_intr.width - 1)
        ic = np.clip(i, 0, src_intr.height - 1)
        out = src[ic, jc]
        if out.ndim == 2:
            out = np.where(inside, out, np.asarray(INVALID_DEPTH, dtype=src.dtype))
        else:
            out = np.where(inside[..., None], out, np.asarray(INVALID_DEPTH, dtype=src.dtype))
        return out

    x = uu - 0.5
    y = vv - 0.5
    j0 = np.floor(x).astype(np.int64)
    i0 = np.floor(y).astype(np.int64)
    wx = x - j0
    wy = y - i0
    j0c = np.clip(j0, 0, src_intr.width - 1)
    j1c = np.clip(j0 + 1, 0, src_intr.width - 1)
    i0c = np.clip(i0, 0, src_intr.height - 1)
    i1c = np.clip(i0 + 1, 0, src_intr.height - 1)
    f = src.astype(np.float64)
    if f.ndim == 2:
        f = f[..., None]
        squeeze = True
    else:
        squeeze = False
    top = f[i0c, j0c] * (1 - wx)[..., None] + f[i0c, j1c] * wx[..., None]
    bot = f[i1c, j0c] * (1 - wx)[..., None] + f[i1c, j1c] * wx[..., None]
    out = top * (1 - wy)[..., None] + bot * wy[..., None]
    if squeeze:
        out = out[..., 0]
    if src.dtype == np.float64:
        return out
    return out.astype(np.float32)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Extrinsics:
    """Camera extrinsics with +z toward `target` and image-down roughly -`up`."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("camera position coincides with target")
    z = z / nz
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return Extrinsics(tuple(matrix_to_quat(rot)), tuple(position))


@dataclass(frozen=True)
class CameraView:
    name: str
    intrinsics: Intrinsics
    extrinsics: Extrinsics


@dataclass(frozen=True)
class Rig:
    """Fixed multi-camera rig; view order is canonical (front, head, wrists)."""

    views: tuple

    def __post_init__(self):
        names = tuple(v.name for v in self.views)
        canonical = tuple(n for n in VIEW_NAMES if n in set(names))
        if not names or len(set(names)) != len(names) or names != canonical:
            raise ValueError(f"rig views must be a subset of {VIEW_NAMES} in "
                             f"canonical order, got {names}")

    @property
    def names(self):
        return tuple(v.name for v in self.views)

    def __len__(self):
        return len(self.views)

    def subset(self, names) -> "Rig":
        keep = [v for v in self.views if v.name in set(names)]
        return Rig(tuple(keep))


def _rig_doc(rig: Rig) -> dict:
    return {"views": [{
        "name": v.name,
        "intrinsics": {k: getattr(v.intrinsics, k)
                       for k in ("fx", "fy", "cx", "cy", "width", "height")},
        "extrinsics": {"quaternion": list(v.extrinsics.quaternion),
                       "translation": list(v.extrinsics.translation)},
    } for v in rig.views]}


def rig_digest(rig: Rig) -> str:
    """Stable short hash of the full rig geometry (names, intrinsics, poses)."""
    blob = json.dumps(_rig_doc(rig), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_rig(rig: Rig, path) -> None:
    with open(path, "w") as fh:
        json.dump(_rig_doc(rig), fh, indent=2)


def load_rig(path) -> Rig:
    with open(path) as fh:
        doc = json.load(fh)
    views = []
    for item in doc["views"]:
        intr = Intrinsics(**item["intrinsics"])
        extr = Extrinsics(tuple(item["extrinsics"]["quaternion"]),
                          tuple(item["extrinsics"]["translation"]))
        views.append(CameraView(item["name"], intr, extr))
    return Rig(tuple(views))


@dataclass
class TokenGeometry:
    """Per-rig constants consumed by lifting: token centers, rays, bin depths.

    Anchors at depth z along token n of view v are `origins[v] + z * rays[v, n]`
    (rays have unit camera z, so z is camera-frame depth).
    """

    centers: np.ndarray      # (N, 2) pixel centers, shared across views
    strides: np.ndarray      # (N,) level stride per token
    grids: list              # [(h_l, w_l)] per level
    origins: np.ndarray      # (V, 3) camera origins in base frame
    rays: np.ndarray         # (V, N, 3) base-frame rays, unit camera z
    depths: np.ndarray       # (B,) bin center depths

    @property
    def tokens_per_view(self) -> int:
        return self.centers.shape[0]


def build_token_geometry(rig: Rig, width: int, height: int,
                         bin_spec: DepthBinSpec, strides=DEFAULT_STRIDES) -> TokenGeometry:
    centers, stride_ids = all_token_centers(width, height, strides)
    origins, rays = [], []
    for view in rig.views:
        if (view.intrinsics.width, view.intrinsics.height) != (width, height):
            raise ValueError(f"view {view.name} intrinsics extents do not match "
                             f"requested {width}x{height}; remap first")
        r_cam = pixel_rays(view.intrinsics, centers)
        rot = view.extrinsics.rotation_matrix()
        rays.append(r_cam @ rot.T)
        origins.append(view.extrinsics.translation_vector())
    return TokenGeometry(centers=centers, strides=stride_ids,
                         grids=level_grids(width, height, strides),
                         origins=np.stack(origins), rays=np.stack(rays),
                         depths=bin_centers(bin_spec))

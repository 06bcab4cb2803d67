"""The PEAF1 dataset container and run metrics.

A dataset is a directory of one-episode binary files plus a JSON manifest.
Episode files are little-endian: magic "PEAF1", a fixed header (version,
view count, extents, step count, joint count, depth-bin count), one block per
step (RGB uint8, raw depth float32, a teacher-present flag byte optionally
followed by teacher depth float32, angles float32), and a length-prefixed
UTF-8 instruction at the tail. Teacher maps exist only in training splits;
`LoadedEpisode.teacher` is None otherwise, so evaluation code cannot read
them by construction.

Readers deduplicate per-step observation blocks by content hash: scripted
scenes are static, so a 128-step episode usually holds one unique frame set.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PEAF1"
VERSION = 1
MANIFEST_NAME = "manifest.json"
METRICS_COLUMNS = ("step", "L_diff", "L_fk", "L_depth", "lr", "grad_norm")


class DataFormatError(ValueError):
    """Malformed episode file: bad magic/version or truncated content."""


@dataclass
class LoadedEpisode:
    """One decoded episode with deduplicated observation frames."""

    instruction: str
    angles: np.ndarray          # (T, N_j) float32
    rgb: np.ndarray             # (U, V, H, W, 3) uint8, unique frames
    raw_depth: np.ndarray       # (U, V, H, W) float32
    teacher_depth: np.ndarray   # (U, V, H, W) float32, or None (eval split)
    frame_of_step: np.ndarray   # (T,) int64 -> unique frame index
    num_bins: int

    @property
    def length(self) -> int:
        return self.angles.shape[0]

    @property
    def num_views(self) -> int:
        return self.rgb.shape[1]


def save_episode(path, record, num_bins: int, with_teacher: bool = True) -> None:
    """Write a synthworld EpisodeRecord; static frames are repeated per step."""
    steps, n_j = record.angles.shape
    v, h, w, _ = record.rgb.shape
    rgb = np.ascontiguousarray(record.rgb, dtype=np.uint8).tobytes()
    raw = np.ascontiguousarray(record.raw_depth, dtype="<f4").tobytes()
    teacher = (np.ascontiguousarray(record.teacher_depth, dtype="<f4").tobytes()
               if with_teacher else b"")
    flag = struct.pack("<B", 1 if with_teacher else 0)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<7I", VERSION, v, w, h, steps, n_j, num_bins))
        angles = np.ascontiguousarray(record.angles, dtype="<f4")
        for t in range(steps):
            fh.write(rgb)
            fh.write(raw)
            fh.write(flag)
            fh.write(teacher)
            fh.write(angles[t].tobytes())
        text = record.instruction.encode("utf-8")
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated episode file while reading {what}")
    return buf


def load_episode(path) -> LoadedEpisode:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise DataFormatError(f"{path}: not a PEAF1 episode file")
        version, v, w, h, steps, n_j, bins = struct.unpack(
            "<7I", _read_exact(fh, 28, "header"))
        if version != VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        rgb_n = v * h * w * 3
        dep_n = v * h * w * 4
        frames, index = [], {}
        frame_of_step = np.empty(steps, dtype=np.int64)
        angles = np.empty((steps, n_j), dtype=np.float32)
        any_teacher = None
        for t in range(steps):
            rgb = _read_exact(fh, rgb_n, "rgb block")
            raw = _read_exact(fh, dep_n, "raw depth block")
            flag = _read_exact(fh, 1, "teacher flag")[0]
            if flag not in (0, 1):
                raise DataFormatError(f"{path}: bad teacher flag {flag}")
            if any_teacher is None:
                any_teacher = bool(flag)
            elif any_teacher != bool(flag):
                raise DataFormatError(f"{path}: inconsistent teacher flags")
            teacher = _read_exact(fh, dep_n, "teacher block") if flag else b""
            angles[t] = np.frombuffer(
                _read_exact(fh, 4 * n_j, "angles"), dtype="<f4")
            key = hashlib.sha256(rgb + raw + teacher).digest()
            if key not in index:
                index[key] = len(frames)
                frames.append((rgb, raw, teacher))
            frame_of_step[t] = index[key]
        tlen = struct.unpack("<I", _read_exact(fh, 4, "instruction length"))[0]
        instruction = _read_exact(fh, tlen, "instruction").decode("utf-8")
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after instruction")
    rgb = np.stack([np.frombuffer(f[0], dtype=np.uint8).reshape(v, h, w, 3)
                    for f in frames])
    raw = np.stack([np.frombuffer(f[1], dtype="<f4").reshape(v, h, w)
                    for f in frames])
    teacher = (np.stack([np.frombuffer(f[2], dtype="<f4").reshape(v, h, w)
                         for f in frames]) if any_teacher else None)
    return LoadedEpisode(instruction=instruction, angles=angles, rgb=rgb,
                         raw_depth=raw, teacher_depth=teacher,
                         frame_of_step=frame_of_step, num_bins=bins)


# ---------------------------------------------------------------------------
# Dataset directory + manifest

def episode_filename(i: int) -> str:
    return f"episode_{i:05d}.peaf1"


def write_dataset(out_dir, records, num_bins: int, manifest_extra: dict,
                  with_teacher: bool = True, force: bool = False) -> dict:
    """Write episodes + manifest; refuses a non-empty directory unless forced."""
    os.makedirs(out_dir, exist_ok=True)
    existing = [f for f in os.listdir(out_dir) if not f.startswith(".")]
    if existing and not force:
        raise FileExistsError(f"{out_dir} is not empty")
    episodes = []
    families = {}
    for i, rec in enumerate(records):
        name = episode_filename(i)
        save_episode(os.path.join(out_dir, name), rec, num_bins, with_teacher)
        episodes.append({"file": name, "family": rec.family,
                         "seed": list(rec.seed), "instruction": rec.instruction})
        families[rec.family] = families.get(rec.family, 0) + 1
    manifest = {"format": "PEAF1", "version": VERSION, "count": len(episodes),
                "families": families, "episodes": episodes}
    manifest.update(manifest_extra)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def read_manifest(dataset_dir) -> dict:
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataFormatError(f"no {MANIFEST_NAME} in {dataset_dir}")
    with open(path) as fh:
        return json.load(fh)


def load_dataset(dataset_dir) -> list:
    manifest = read_manifest(dataset_dir)
    return [load_episode(os.path.join(dataset_dir, e["file"]))
            for e in manifest["episodes"]]


# ---------------------------------------------------------------------------
# Metrics CSV

class MetricsWriter:
    """Append-only CSV: step,L_diff,L_fk,L_depth,lr,grad_norm."""

    def __init__(self, path, resume: bool = False):
        self.path = path
        if not resume or not os.path.exists(path):
            with open(path, "w") as fh:
                fh.write(",".join(METRICS_COLUMNS) + "\n")

    def write(self, step: int, l_diff: float, l_fk: float, l_depth: float,
              lr: float, grad_norm: float) -> None:
        row = (f"{step},{l_diff:.8e},{l_fk:.8e},{l_depth:.8e},"
               f"{lr:.8e},{grad_norm:.8e}\n")
        with open(self.path, "a") as fh:
            fh.write(row)


def read_metrics(path) -> dict:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if tuple(header) != METRICS_COLUMNS:
        raise DataFormatError(f"unexpected metrics columns {header}")
    cols = {name: np.array([float(r[i]) for r in rows])
            for i, name in enumerate(header)}
    cols["step"] = cols["step"].astype(np.int64)
    return cols

"""Binary checkpoints: model state, optimizer moments, step counter, and the
run hash that binds a checkpoint to (config semantics, rig, chain).

Layout (little-endian): magic "PEAFCKPT", version u32, run-hash string,
global step u64, noise-schedule table (T u32 + (T+1) float64), a JSON meta
blob (optimizer scalar state), then a tensor table of named arrays (model
state_dict entries prefixed "model.", optimizer moment tensors "opt.<pid>.").
Tensors round-trip bitwise. Loading verifies the run hash before touching
any tensor and fails cleanly on truncation or unknown names.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

MAGIC = b"PEAFCKPT"
VERSION = 1

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
    "uint8": (torch.uint8, "u1"),
    "bool": (torch.bool, "?"),
}
_TORCH_NAMES = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


class HashMismatchError(CheckpointError):
    """Checkpoint belongs to a different (config, rig, chain) combination."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def _read_str(fh, what: str) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4, f"{what} length"))
    return _read_exact(fh, n, what).decode("utf-8")


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy()).tobytes()


def _write_tensor(fh, name: str, t: torch.Tensor) -> None:
    dtype_name = _TORCH_NAMES.get(t.dtype)
    if dtype_name is None:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name}")
    fh.write(_pack_str(name))
    fh.write(_pack_str(dtype_name))
    fh.write(struct.pack("<I", t.dim()))
    fh.write(struct.pack(f"<{t.dim()}Q" if t.dim() else "<0Q", *t.shape))
    raw = _tensor_bytes(t)
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)


def _read_tensor(fh):
    name = _read_str(fh, "tensor name")
    dtype_name = _read_str(fh, "tensor dtype")
    if dtype_name not in _DTYPES:
        raise CheckpointError(f"unknown tensor dtype {dtype_name!r}")
    torch_dtype, np_dtype = _DTYPES[dtype_name]
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "tensor shape"))
    (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor size"))
    raw = _read_exact(fh, nbytes, f"tensor data for {name}")
    arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()
    return name, torch.from_numpy(arr).to(torch_dtype)


def save_checkpoint(path, model, optimizer, global_step: int,
                    run_hash: str) -> None:
    tensors = {}
    for name, t in model.state_dict().items():
        tensors[f"model.{name}"] = t
    meta = {"optimizer": None}
    if optimizer is not None:
        ostate = optimizer.state_dict()
        steps = {}
        for pid, st in ostate["state"].items():
            for key, val in st.items():
                if isinstance(val, torch.Tensor) and val.dim() > 0:
                    tensors[f"opt.{pid}.{key}"] = val
                elif isinstance(val, torch.Tensor):
                    steps[f"{pid}.{key}"] = float(val.item())
                else:
                    steps[f"{pid}.{key}"] = float(val)
        groups = [{k: v for k, v in g.items() if k != "params"}
                  for g in ostate["param_groups"]]
        sizes = [len(g["params"]) for g in ostate["param_groups"]]
        meta["optimizer"] = {"scalars": steps, "groups": groups,
                             "group_sizes": sizes}
    schedule = model.schedule
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(_pack_str(run_hash))
        fh.write(struct.pack("<Q", global_step))
        fh.write(struct.pack("<I", schedule.total))
        fh.write(np.ascontiguousarray(schedule.alpha_bar, dtype="<f8").tobytes())
        meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<Q", len(meta_raw)))
        fh.write(meta_raw)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def read_checkpoint(path) -> dict:
    """Parse a checkpoint into a dict without touching any model."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        run_hash = _read_str(fh, "run hash")
        (step,) = struct.unpack("<Q", _read_exact(fh, 8, "step"))
        (total,) = struct.unpack("<I", _read_exact(fh, 4, "schedule length"))
        ab = np.frombuffer(_read_exact(fh, 8 * (total + 1), "schedule"),
                           dtype="<f8").copy()
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
        meta = json.loads(_read_exact(fh, meta_len, "meta").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            name, t = _read_tensor(fh)
            tensors[name] = t
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return {"run_hash": run_hash, "step": step, "alpha_bar": ab,
            "meta": meta, "tensors": tensors}


def load_checkpoint(path, model, optimizer=None, expected_run_hash=None) -> int:
    """Restore model (and optimizer) state in place; returns the global step.

    Raises HashMismatchError before any state is modified when the stored run
    hash differs from `expected_run_hash`.
    """
    data = read_checkpoint(path)
    if expected_run_hash is not None and data["run_hash"] != expected_run_hash:
        raise HashMismatchError(
            f"checkpoint run hash {data['run_hash']} != expected "
            f"{expected_run_hash}; config, rig, or chain differ")
    model_tensors = {k[len("model."):]: v for k, v in data["tensors"].items()
                     if k.startswith("model.")}
    own = model.state_dict()
    missing = set(own) - set(model_tensors)
    extra = set(model_tensors) - set(own)
    if missing or extra:
        raise CheckpointError(
            f"state mismatch: missing {sorted(missing)[:4]}, "
            f"unexpected {sorted(extra)[:4]}")
    for name, t in model_tensors.items():
        if own[name].shape != t.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {tuple(own[name].shape)} vs "
                f"{tuple(t.shape)}")
    model.load_state_dict(model_tensors)
    if optimizer is not None and data["meta"]["optimizer"] is not None:
        ometa = data["meta"]["optimizer"]
        state = {}
        for key, val in ometa["scalars"].items():
            pid, field = key.split(".", 1)
            state.setdefault(int(pid), {})[field] = torch.tensor(val)
        for name, t in data["tensors"].items():
            if not name.startswith("opt."):
                continue
            _, pid, field = name.split(".", 2)
            state.setdefault(int(pid), {})[field] = t
        groups = optimizer.state_dict()["param_groups"]
        if [len(g["params"]) for g in groups] != ometa["group_sizes"]:
            raise CheckpointError("optimizer group sizes differ from checkpoint")
        restored = []
        for saved, current in zip(ometa["groups"], groups):
            merged = dict(current)
            merged.update(saved)
            restored.append(merged)
        optimizer.load_state_dict({"state": state, "param_groups": restored})
    return int(data["step"])

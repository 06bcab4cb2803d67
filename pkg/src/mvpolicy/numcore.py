"""Numeric substrate: deterministic randomness, gradient checking, shared kernels.

All learnable modules in this package are built on torch tensors; this module
pins down the conventions they share — a splittable, platform-stable random
stream, the finite-difference gradient harness that every differentiable op is
verified against, and the default parameter initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

REL_ERR_EPS = 1e-12


class Rng:
    """Splittable deterministic random stream.

    Wraps a numpy PCG64 generator keyed by a SeedSequence so that identical
    seeds reproduce identical streams across runs and platforms. `split`
    derives independent child streams; parallel workers must each own one.
    """

    algorithm = "pcg64-seedseq"

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def seed_entropy(self):
        return self._seq.entropy

    def split(self, n: int) -> list["Rng"]:
        return [Rng(s) for s in self._seq.spawn(n)]

    def spawn(self) -> "Rng":
        return self.split(1)[0]

    def uniform(self, low=0.0, high=1.0, size=None, dtype=np.float64):
        if size is None:
            return float(self._gen.uniform(low, high))
        return self._gen.uniform(low, high, size).astype(dtype, copy=False)

    def normal(self, size=None, dtype=np.float64):
        if size is None:
            return float(self._gen.standard_normal())
        return self._gen.standard_normal(size).astype(dtype, copy=False)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def torch_normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        # Drawn via numpy so the stream stays platform-stable.
        return torch.from_numpy(self.normal(size=shape)).to(dtype)

    def torch_uniform(self, low, high, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.uniform(low, high, size=shape)).to(dtype)


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic vs central-difference gradients."""

    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    failed_coords: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        if self.rel_err.size == 0:
            return 0.0
        return float(np.max(self.rel_err))

    def ok(self, tol: float = 1e-4) -> bool:
        return (not self.failed_coords
                and bool(np.all(np.isfinite(self.rel_err)))
                and self.max_rel_err <= tol)


def grad_check(scalar_function, point, step: float = 1e-5, coords=None) -> GradCheckReport:
    """Compare the analytic gradient of a scalar function with central differences.

    `scalar_function` maps a 1-D float64 torch tensor to a scalar tensor and
    must be autograd-traceable. `coords` optionally restricts the finite
    differences to a subset of coordinates (analytic values are still exact);
    by default every coordinate is checked. Non-finite function values are
    reported as failed coordinates rather than raised.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = torch.as_tensor(point, dtype=torch.float64).detach().reshape(-1).clone()
    n = x0.numel()
    if coords is None:
        coords = np.arange(n)
    else:
        coords = np.asarray(coords, dtype=np.int64)

    x = x0.clone().requires_grad_(True)
    value = scalar_function(x)
    analytic_full = torch.autograd.grad(value, x, allow_unused=True)[0]
    if analytic_full is None:
        analytic_full = torch.zeros_like(x0)
    analytic = analytic_full.detach().numpy()[coords]

    numeric = np.zeros(len(coords))
    failed = []
    with torch.no_grad():
        for k, i in enumerate(coords):
            xp = x0.clone()
            xp[i] += step
            fp = float(scalar_function(xp))
            xm = x0.clone()
            xm[i] -= step
            fm = float(scalar_function(xm))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failed.append(int(i))
                numeric[k] = np.nan
                continue
            numeric[k] = (fp - fm) / (2.0 * step)

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + REL_ERR_EPS)
    rel[np.isnan(numeric)] = np.inf
    return GradCheckReport(coords=coords, analytic=analytic, numeric=numeric,
                           rel_err=rel, failed_coords=failed)


def softmax(logits: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Numerically stable softmax along `axis`; rejects empty axes."""
    if logits.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = logits - logits.amax(dim=axis, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def preserve_init(param: torch.Tensor) -> torch.Tensor:
    """Mark a parameter so `init_parameters` leaves its constructed value alone."""
    param._preserve_init = True
    return param


def init_parameters(module: nn.Module, rng: Rng) -> None:
    """Deterministically (re)initialize a module's parameters from `rng`.

    Weights with >=2 dims are uniform in +-1/sqrt(fan_in); 1-D and scalar
    parameters are zeroed; LayerNorm keeps (1, 0); parameters marked with
    `preserve_init` keep their constructed values. Iteration is over sorted
    parameter names so the result is independent of construction order.
    """
    ln_params = set()
    for mname, sub in module.named_modules():
        if isinstance(sub, nn.LayerNorm):
            for pname, _ in sub.named_parameters(recurse=False):
                ln_params.add(f"{mname}.{pname}" if mname else pname)

    with torch.no_grad():
        for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if getattr(param, "_preserve_init", False):
                continue
            if name in ln_params:
                if name.endswith("weight"):
                    param.fill_(1.0)
                else:
                    param.zero_()
            elif param.dim() >= 2:
                fan_in = int(np.prod(param.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                values = rng.uniform(-bound, bound, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values).to(param.dtype))
            else:
                param.zero_()


def parameter_vector(module: nn.Module, names=None) -> torch.Tensor:
    """Flatten (a subset of) a module's parameters into one 1-D tensor."""
    params = dict(module.named_parameters())
    if names is None:
        names = sorted(params)
    return torch.cat([params[n].detach().reshape(-1) for n in names])


def load_parameter_vector(module: nn.Module, vector: torch.Tensor, names=None) -> None:
    """Write a flat vector back into (a subset of) a module's parameters."""
    params = dict(module.named_parameters())
    if names is None:
        names = sorted(params)
    offset = 0
    with torch.no_grad():
        for n in names:
            p = params[n]
            k = p.numel()
            p.copy_(vector[offset:offset + k].reshape(p.shape).to(p.dtype))
            offset += k
    if offset != vector.numel():
        raise ValueError("parameter vector length mismatch")

"""Denoising-diffusion machinery for action chunks.

Training uses the squared-cosine DDPM schedule (T=1000, clean-sample
prediction): angles are diffused and pose channels recomputed through FK so
every noisy trajectory stays kinematically consistent. Inference uses a
deterministic multistep sampler that steps the DDIM update from clean-sample
predictions over uniformly strided timesteps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .kinematics import TorchChain
from .numcore import Rng


def cosine_alpha_bar(t: float, total: int) -> float:
    """Squared-cosine signal level f(t)/f(0) with f(t)=cos^2(((t/T)+0.008)/1.008 * pi/2)."""
    if not 0 <= t <= total:
        raise ValueError("t must lie in [0, T]")

    def f(u):
        return math.cos(((u / total) + 0.008) / 1.008 * math.pi / 2.0) ** 2

    return f(t) / f(0)


@dataclass(frozen=True)
class DiffusionSchedule:
    """alpha_bar[t] for t = 0..T after per-step beta clipping at 0.999."""

    total: int
    alpha_bar: np.ndarray  # (T+1,) float64, alpha_bar[0] = 1, strictly decreasing

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.shape != (self.total + 1,) or ab[0] != 1.0:
            raise ValueError("alpha_bar must start at 1 with T+1 entries")
        if not (np.all(np.diff(ab) < 0) and np.all(ab > 0) and np.all(ab <= 1)):
            raise ValueError("alpha_bar must be strictly decreasing in (0, 1]")

    def ab(self, t) -> np.ndarray:
        return self.alpha_bar[np.asarray(t)]


def make_schedule(total: int = 1000, max_beta: float = 0.999) -> DiffusionSchedule:
    raw = np.array([cosine_alpha_bar(t, total) for t in range(total + 1)])
    beta = 1.0 - raw[1:] / raw[:-1]
    beta = np.clip(beta, 0.0, max_beta)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return DiffusionSchedule(total=total, alpha_bar=alpha_bar)


def ddpm_forward(angles: torch.Tensor, t: torch.Tensor, noise: torch.Tensor,
                 schedule: DiffusionSchedule) -> torch.Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps on angle channels.

    angles/noise: (B, H, N_j); t: (B,) integer timesteps. Pose channels of the
    noisy trajectory are recomputed by the caller via FK on the result.
    """
    ab = torch.from_numpy(schedule.ab(t.numpy())).to(angles.dtype)
    ab = ab.reshape(-1, *([1] * (angles.dim() - 1)))
    return torch.sqrt(ab) * angles + torch.sqrt(1.0 - ab) * noise


def noisy_joint_state(angles: torch.Tensor, t: torch.Tensor, noise: torch.Tensor,
                      schedule: DiffusionSchedule, chain: TorchChain) -> torch.Tensor:
    """Diffuse angles, then rebuild the full (B, H, N_j, 8) state via FK."""
    x_t = ddpm_forward(angles, t, noise, schedule)
    return chain.joint_state(x_t)


def sample_timesteps(total: int, steps: int) -> list:
    """Uniformly strided denoising timesteps from T down, e.g. [1000, 900, ..., 100]."""
    if total % steps != 0:
        raise ValueError("sampler steps must divide T")
    stride = total // steps
    return [total - i * stride for i in range(steps)]


def sample(denoise_fn, shape, schedule: DiffusionSchedule, steps: int,
           rng: Rng, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Deterministic multistep sampler over clean-sample predictions.

    denoise_fn(x_t, t) -> x0_hat operates on angle tensors of `shape`
    (B, H, N_j). Each step converts the prediction to the implied noise and
    applies the DDIM update to the next timestep; the final step lands on
    t=0 where alpha_bar = 1, so the output is the last clean prediction.
    """
    x = rng.torch_normal(shape, dtype=dtype)
    stride = schedule.total // steps
    for t in sample_timesteps(schedule.total, steps):
        ab_t = float(schedule.alpha_bar[t])
        x0_hat = denoise_fn(x, t)
        eps_hat = (x - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
        t_next = t - stride
        ab_n = float(schedule.alpha_bar[t_next])
        x = math.sqrt(ab_n) * x0_hat + math.sqrt(1.0 - ab_n) * eps_hat
    return x


def execute_window(trajectory: torch.Tensor, exec_horizon: int) -> torch.Tensor:
    """Leading exec_horizon steps' angle channels as commands.

    trajectory: (..., H, N_j, 8) -> (..., exec_horizon, N_j) angles.
    """
    horizon = trajectory.shape[-3]
    if exec_horizon > horizon:
        raise ValueError("execution window exceeds prediction horizon")
    return trajectory[..., :exec_horizon, :, 0]

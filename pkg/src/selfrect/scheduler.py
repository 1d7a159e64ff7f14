"""Deterministic DDIM arithmetic (eta = 0).

Latents are indexed on a coarse grid ``z_0 ... z_T``: ``z_0`` is the clean
encoded image and ``z_T`` the fully inverted code.  Grid level ``k >= 1``
sits at native training timestep ``(k - 1) * stride`` ("leading" spacing),
and level 0 is the clean end with ``alpha_bar = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

NATIVE_STEPS = 1000


def scaled_linear_alphas_cumprod(
    num_train_timesteps: int = NATIVE_STEPS,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
) -> torch.Tensor:
    """Cumulative alpha products of the latent diffusion v1.x training schedule."""
    betas = np.linspace(beta_start**0.5, beta_end**0.5, num_train_timesteps, dtype=np.float64) ** 2
    return torch.from_numpy(np.cumprod(1.0 - betas)).float()


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    # native timestep for grid levels 1..T (index 0 of this tensor is level 1)
    native_timesteps: torch.Tensor
    # alpha_bar for grid levels 0..T
    alpha_bar: torch.Tensor

    @property
    def stride(self) -> int:
        if self.num_steps == 1:
            return int(self.native_timesteps[0]) + 1
        return int(self.native_timesteps[1] - self.native_timesteps[0])

    def model_timestep(self, level: int) -> int:
        """Native timestep fed to the noise predictor at grid level ``level``.

        Level 0 has no native timestep of its own; it shares level 1's.
        """
        if not 0 <= level <= self.num_steps:
            raise ValueError(f"grid level {level} outside [0, {self.num_steps}]")
        return int(self.native_timesteps[max(level, 1) - 1])

    def inversion_timestep(self, t: int) -> int:
        # the step z_t -> z_{t+1} is conditioned on the destination level
        return self.model_timestep(t + 1)

    def sampling_timestep(self, t: int) -> int:
        return self.model_timestep(t)


def build_schedule(num_steps: int, native_alphas: torch.Tensor | None = None) -> NoiseSchedule:
    """Uniform sub-grid of a native ``alphas_cumprod`` table."""
    if native_alphas is None:
        native_alphas = scaled_linear_alphas_cumprod()
    native_alphas = torch.as_tensor(native_alphas, dtype=torch.float64)
    native_len = native_alphas.shape[0]
    if num_steps < 1 or num_steps > native_len:
        raise ValueError(f"num_steps must be in [1, {native_len}], got {num_steps}")
    if native_len % num_steps:
        raise ValueError(f"num_steps={num_steps} does not divide the native schedule length {native_len}")
    stride = native_len // num_steps
    native_timesteps = torch.arange(num_steps, dtype=torch.long) * stride
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), native_alphas[native_timesteps]])
    return NoiseSchedule(num_steps, native_timesteps, alpha_bar.float())


def _alpha(sched: NoiseSchedule, level: int, like: torch.Tensor) -> torch.Tensor:
    if not 0 <= level <= sched.num_steps:
        raise ValueError(f"grid level {level} outside [0, {sched.num_steps}]")
    return sched.alpha_bar[level].to(device=like.device, dtype=like.dtype)


def _ddim_move(x0: torch.Tensor, eps: torch.Tensor, alpha_dst: torch.Tensor) -> torch.Tensor:
    return alpha_dst.sqrt() * x0 + (1 - alpha_dst).sqrt() * eps


def predict_x0(z: torch.Tensor, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Clean-sample estimate ``(z - sqrt(1 - a_t) * eps) / sqrt(a_t)``."""
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs eps {tuple(eps.shape)}")
    a_t = _alpha(sched, t, z)
    if a_t <= 0:
        raise ValueError(f"alpha_bar at level {t} is zero")
    return (z - (1 - a_t).sqrt() * eps) / a_t.sqrt()


def sample_step(z_t: torch.Tensor, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """One DDIM denoising step ``z_t -> z_{t-1}``."""
    if t <= 0:
        raise ValueError("cannot sample past the clean endpoint (t = 0)")
    x0 = predict_x0(z_t, eps, t, sched)
    return _ddim_move(x0, eps, _alpha(sched, t - 1, z_t))


def invert_step(z_t: torch.Tensor, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """One DDIM inversion step ``z_t -> z_{t+1}``."""
    if t >= sched.num_steps:
        raise ValueError(f"cannot invert past the noisiest endpoint (t = {sched.num_steps})")
    x0 = predict_x0(z_t, eps, t, sched)
    return _ddim_move(x0, eps, _alpha(sched, t + 1, z_t))

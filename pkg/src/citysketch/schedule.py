"""Forward-noising schedule and the deterministic strided sampler."""

from __future__ import annotations

import numpy as np
import torch

from .config import ScheduleConfig


class NoiseSchedule:
    """Linear beta schedule. Index 0 is the clean state (alpha_bar[0] == 1);
    betas[k] applies at step k for k in 1..T."""

    def __init__(self, timesteps: int = 1000, beta_start: float = 1e-4,
                 beta_end: float = 2e-2):
        if timesteps < 1:
            raise ValueError("need at least one timestep")
        self.timesteps = timesteps
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        if not (0 < betas[0] and betas[-1] < 1):
            raise ValueError("betas must lie in (0, 1)")
        self.betas = np.concatenate([[0.0], betas])
        alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(alphas)
        assert self.alpha_bar[0] == 1.0
        if not (np.diff(self.alpha_bar[1:]) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> "NoiseSchedule":
        return cls(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    def _gather(self, k, like: torch.Tensor) -> torch.Tensor:
        k = torch.as_tensor(k, dtype=torch.long)
        if (k < 0).any() or (k > self.timesteps).any():
            raise ValueError(f"timestep out of range [0, {self.timesteps}]")
        ab = torch.from_numpy(self.alpha_bar)[k].to(like.dtype)
        while ab.dim() < like.dim():
            ab = ab.unsqueeze(-1)
        return ab


def add_noise(z0: torch.Tensor, eps: torch.Tensor, k, schedule: NoiseSchedule) -> torch.Tensor:
    """z_k = sqrt(alpha_bar_k) z0 + sqrt(1 - alpha_bar_k) eps."""
    if eps.shape != z0.shape:
        raise ValueError("noise shape must match")
    ab = schedule._gather(k, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def predict_x0(z_k: torch.Tensor, eps_hat: torch.Tensor, k,
               schedule: NoiseSchedule) -> torch.Tensor:
    """Invert add_noise given a noise estimate."""
    ab = schedule._gather(k, z_k)
    if (ab < 1e-8).any():
        raise ValueError("alpha_bar too small; predict_x0 is numerically unstable here")
    return (z_k - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def ddim_timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    """Uniformly strided strictly-decreasing timestep ladder T = k_0 > ... > 0."""
    if not (1 <= steps <= schedule.timesteps):
        raise ValueError("steps must lie in [1, T]")
    ks = np.round(np.linspace(schedule.timesteps, 0, steps + 1)).astype(int)
    ks = sorted(set(int(k) for k in ks), reverse=True)
    assert ks[0] == schedule.timesteps and ks[-1] == 0
    return ks


@torch.no_grad()
def ddim_sample(
    eps_fn,
    shape: tuple,
    schedule: NoiseSchedule,
    steps: int,
    generator: torch.Generator | None = None,
    z_init: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic (eta = 0) sampling over a strided timestep subset.

    eps_fn(z, k) must return the predicted noise for the batch at scalar
    timestep k. Randomness enters only through the initial latent, so a fixed
    generator (or explicit z_init) makes the output exactly reproducible.
    """
    if z_init is not None:
        z = z_init.clone()
    else:
        z = torch.randn(shape, generator=generator)
    ks = ddim_timesteps(schedule, steps)
    for k, k_prev in zip(ks[:-1], ks[1:]):
        eps = eps_fn(z, k)
        x0 = predict_x0(z, eps, k, schedule)
        ab_prev = schedule._gather(k_prev, z)
        z = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps
    return z

"""Forward noising schedule and timestep subsampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ConfigError


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.validate()

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def validate(self) -> None:
        if self.betas.ndim != 1 or self.betas.shape[0] < 1:
            raise ConfigError("schedule needs at least one beta")
        if not (np.all(self.betas > 0.0) and np.all(self.betas < 1.0)):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.betas) < 0.0):
            raise ConfigError("betas must be non-decreasing")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if self.alpha_bars[-1] >= 0.01:
            raise ConfigError(
                f"terminal alpha_bar {self.alpha_bars[-1]:.4f} >= 0.01; the final "
                "step would not be close enough to pure noise"
            )

    @classmethod
    def linear(cls, num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(betas=np.linspace(beta_start, beta_end, num_steps))

    def alpha_bar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if bool((t < 0).any()) or bool((t >= self.num_steps).any()):
            raise ValueError(f"timestep out of range [0, {self.num_steps})")
        return torch.from_numpy(self.alpha_bars)[t]


def forward_diffuse(z0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) noise."""
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != z0 shape {tuple(z0.shape)}")
    ab = schedule.alpha_bar(t).to(z0.dtype)
    if ab.ndim > 0:
        # per-sample timesteps: broadcast over trailing dims
        if ab.shape[0] != z0.shape[0]:
            raise ValueError("per-sample t must match the batch dimension")
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * noise


def ddim_timesteps(num_steps: int, sample_steps: int) -> np.ndarray:
    """Uniform subsequence of timesteps, ascending, always containing 0 and T-1."""
    if not 1 <= sample_steps <= num_steps:
        raise ConfigError(f"sample_steps must be in [1, {num_steps}], got {sample_steps}")
    if sample_steps == 1:
        return np.array([num_steps - 1], dtype=np.int64)
    ts = np.round(np.linspace(0, num_steps - 1, sample_steps)).astype(np.int64)
    if np.unique(ts).shape[0] != ts.shape[0]:
        raise ConfigError("sample_steps too dense for this schedule; timesteps collide")
    return ts

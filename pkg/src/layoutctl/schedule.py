"""Deterministic DDIM sampling schedule.

The noise schedule follows the stable-diffusion v1 convention: 1000 training
timesteps with betas linear in sqrt between 0.00085 and 0.012, sampled at
``total_steps`` evenly strided timesteps. Updates are the eta=0 (fully
deterministic) DDIM rule; the final update lands on the predicted x0 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TRAIN_TIMESTEPS = 1000
BETA_START = 0.00085
BETA_END = 0.012


def _alpha_bars(train_steps: int = TRAIN_TIMESTEPS) -> np.ndarray:
    betas = np.linspace(BETA_START**0.5, BETA_END**0.5, train_steps, dtype=np.float64) ** 2
    return np.cumprod(1.0 - betas)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Sampling-time view of the noise schedule.

    ``timesteps`` are the train-scale timesteps visited while denoising,
    descending (noisiest first); ``alpha_bars`` are the cumulative alpha
    products at those timesteps. Index arguments below are 0-based positions in
    this subsequence, not train timesteps.
    """

    total_steps: int
    timesteps: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        ab = np.asarray(self.alpha_bars)
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ConfigError("alpha_bar values must lie in (0, 1]")

    @classmethod
    def create(cls, total_steps: int, train_steps: int = TRAIN_TIMESTEPS) -> "DiffusionSchedule":
        if not 1 <= total_steps <= train_steps:
            raise ConfigError(
                f"total_steps must be in [1, {train_steps}], got {total_steps}"
            )
        stride = train_steps // total_steps
        timesteps = (np.arange(total_steps) * stride)[::-1].copy()
        alpha_bars = _alpha_bars(train_steps)[timesteps]
        return cls(total_steps=total_steps, timesteps=timesteps, alpha_bars=alpha_bars)

    def timestep(self, index: int) -> int:
        self._check_index(index)
        return int(self.timesteps[index])

    def alpha_bar(self, index: int) -> float:
        self._check_index(index)
        return float(self.alpha_bars[index])

    def alpha_bar_after(self, index: int) -> float:
        """alpha_bar of the state the update at ``index`` steps into (1.0 past the end)."""
        self._check_index(index)
        if index + 1 < self.total_steps:
            return float(self.alpha_bars[index + 1])
        return 1.0

    def _check_index(self, index: int):
        if not 0 <= index < self.total_steps:
            raise ConfigError(
                f"step index {index} outside schedule of {self.total_steps} steps"
            )


def ddim_step(z_t: np.ndarray, epsilon: np.ndarray, t: int, schedule: DiffusionSchedule) -> np.ndarray:
    """One deterministic DDIM update: predict x0, re-noise to the next level.

    Args:
        z_t: current latent.
        epsilon: noise prediction for ``z_t``.
        t: 0-based step index into the schedule (0 = noisiest).
        schedule: sampling schedule providing alpha_bar values.
    """
    if z_t.shape != epsilon.shape:
        raise ConfigError(f"latent/epsilon shape mismatch: {z_t.shape} vs {epsilon.shape}")
    dtype = z_t.dtype
    a_t = dtype.type(schedule.alpha_bar(t))
    a_prev = dtype.type(schedule.alpha_bar_after(t))
    sqrt_a_t = np.sqrt(a_t)
    x0 = (z_t - np.sqrt(dtype.type(1.0) - a_t) * epsilon) / sqrt_a_t
    return np.sqrt(a_prev) * x0 + np.sqrt(dtype.type(1.0) - a_prev) * epsilon

"""Linear beta schedule and the closed-form forward (noising) process."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep betas for t = 1..T.

    Arrays are stored 0-based (``betas[t-1]`` is beta_t). ``alpha_bar(0)``
    is defined as 1 so the final deterministic sampling step can land on
    the clean image.
    """

    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return float(self.alpha_bars[t - 1])

    def alpha_bar_table(self) -> torch.Tensor:
        """Float64 tensor indexed directly by t in 0..T (entry 0 is 1)."""
        return torch.from_numpy(np.concatenate([[1.0], self.alpha_bars]))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _gather(sched: NoiseSchedule, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() and (t.min() < 1 or t.max() > sched.T):
        raise ValueError(f"timesteps must lie in 1..{sched.T}, got range [{int(t.min())}, {int(t.max())}]")
    ab = sched.alpha_bar_table()[t].to(like.dtype)
    return ab.view(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Draw x_t ~ q(x_t | x_0) using the supplied standard-normal ``eps``."""
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} differs from image shape {tuple(x0.shape)}")
    ab = _gather(sched, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps

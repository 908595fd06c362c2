"""Deterministic DDIM sampling (sigma_t = 0) on a strided timestep subsequence."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .schedule import NoiseSchedule


def ddim_timesteps(T: int, num_steps: int) -> list[int]:
    """Uniform-stride subsequence of 1..T ending at T, e.g. (1000, 200) -> 5, 10, ..., 1000."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must lie in 1..{T}, got {num_steps}")
    taus = np.round(np.arange(1, num_steps + 1) * (T / num_steps)).astype(int).tolist()
    assert taus[-1] == T and all(a < b for a, b in zip(taus, taus[1:]))
    return taus


@dataclass(frozen=True)
class DdimSamplerConfig:
    num_steps: int = 200
    sigma_t: float = 0.0
    timesteps: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.sigma_t != 0.0:
            raise ValueError("only the deterministic sampler (sigma_t = 0) is supported")

    def taus(self, T: int) -> list[int]:
        if self.timesteps:
            taus = list(self.timesteps)
            if len(taus) != self.num_steps or any(a >= b for a, b in zip(taus, taus[1:])) \
                    or taus[0] < 1 or taus[-1] > T:
                raise ValueError("explicit timesteps must be strictly increasing, within 1..T and num_steps long")
            return taus
        return ddim_timesteps(T, self.num_steps)


class SingularityError(ArithmeticError):
    pass


def predict_x0(x_t: torch.Tensor, eps_pred: torch.Tensor, alpha_bar: float) -> torch.Tensor:
    if alpha_bar <= 0.0:
        raise SingularityError("alpha_bar is 0; the clean-image estimate is undefined")
    return (x_t - (1.0 - alpha_bar) ** 0.5 * eps_pred) / alpha_bar ** 0.5


def ddim_step(x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> torch.Tensor:
    """Move from timestep ``t`` to ``t_prev`` (0 means the clean image) with no noise term."""
    if t_prev > t:
        raise ValueError(f"ddim_step goes backwards in time; got t={t}, t_prev={t_prev}")
    if t_prev == t:
        return x_t
    ab_prev = sched.alpha_bar(t_prev)
    x0_hat = predict_x0(x_t, eps_pred, sched.alpha_bar(t))
    return ab_prev ** 0.5 * x0_hat + (1.0 - ab_prev) ** 0.5 * eps_pred


def initial_noise(n: int, shape: tuple[int, ...], seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, *shape, generator=g)


@torch.no_grad()
def ddim_sample(
    model: torch.nn.Module,
    sched: NoiseSchedule,
    cfg: DdimSamplerConfig,
    n: int,
    seed: int,
    image_shape: tuple[int, int, int] = (3, 64, 64),
    batch_size: int = 64,
    device: str | torch.device = "cpu",
) -> torch.Tensor:
    """Generate ``n`` images from seeded Gaussian noise and clamp them to [-1, 1].

    All starting noise is drawn up front from one generator, so the result
    does not depend on ``batch_size``.
    """
    was_training = model.training
    model.eval()
    taus = cfg.taus(sched.T)
    prev = [0] + taus[:-1]
    noise = initial_noise(n, image_shape, seed)
    out = []
    try:
        for start in range(0, n, batch_size):
            x = noise[start:start + batch_size].to(device)
            for t, t_prev in zip(reversed(taus), reversed(prev)):
                tt = torch.full((x.shape[0],), t, dtype=torch.long, device=device)
                x = ddim_step(x, model(x, tt), t, t_prev, sched)
            out.append(x.clamp(-1, 1).cpu())
    finally:
        model.train(was_training)
    if not out:
        return torch.empty(0, *image_shape)
    return torch.cat(out)

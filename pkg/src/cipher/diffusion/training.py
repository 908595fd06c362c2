"""Noise-prediction objective, cosine-annealed training loop and fake generation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import torch
import torch.nn.functional as F

from ..checkpoint import CheckpointError, file_digest, load_checkpoint, save_checkpoint
from ..dataio import save_png
from .sampling import DdimSamplerConfig, ddim_sample
from .schedule import NoiseSchedule, make_schedule, q_sample
from .unet import UNet, UNetSpec

log = logging.getLogger(__name__)


def ddpm_loss(
    model: torch.nn.Module,
    x0: torch.Tensor,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared error between true and predicted noise.

    ``t`` is drawn uniformly from 1..T and ``eps`` from N(0, I) unless given,
    which lets gradient checks freeze them.
    """
    n = x0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (n,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    t = t.to(x0.device)
    eps = eps.to(x0.device)
    x_t = q_sample(x0, t, eps, sched)
    return F.mse_loss(model(x_t, t), eps)


def cosine_lr(step: int, total: int, base: float) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class DiffusionTrainConfig:
    iterations: int = 100_000
    batch_size: int = 32
    lr: float = 2e-4
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 42
    unet: UNetSpec = field(default_factory=UNetSpec)
    grad_checkpoint: bool = False
    checkpoint_every: int = 0
    sample_every: int = 0
    sample_steps: int = 50

    def __post_init__(self):
        for name in ("iterations", "batch_size", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("beta range must lie within (0, 1)")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


def diffusion_arch(cfg: DiffusionTrainConfig) -> dict:
    return {"net": "unet", "unet": cfg.unet.to_dict(), "T": cfg.T,
            "beta_start": cfg.beta_start, "beta_end": cfg.beta_end}


@dataclass
class DiffusionResult:
    model: UNet
    sched: NoiseSchedule
    losses: list[float] = field(default_factory=list)


def train_diffusion(
    cfg: DiffusionTrainConfig,
    data: Iterator[torch.Tensor],
    out_dir: str | Path | None = None,
    resume: bool = False,
    progress: Callable[[dict], None] | None = None,
    log_every: int = 50,
    device: str | torch.device = "cpu",
) -> DiffusionResult:
    """Run ``cfg.iterations`` Adam steps on :func:`ddpm_loss` with a cosine-annealed rate."""
    torch.manual_seed(cfg.seed)
    model = UNet(cfg.unet, grad_checkpoint=cfg.grad_checkpoint).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = cfg.schedule()
    gen = torch.Generator().manual_seed(cfg.seed)
    result = DiffusionResult(model, sched)
    out_dir = Path(out_dir) if out_dir is not None else None
    state_path = out_dir / "train_state.pt" if out_dir else None
    start = 0
    if resume and state_path is not None and state_path.is_file():
        state = torch.load(state_path, weights_only=False)
        if state["arch"] != diffusion_arch(cfg):
            raise CheckpointError(f"cannot resume from {state_path}: U-Net configuration differs")
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["opt"])
        gen.set_state(state["gen"])
        result.losses = state["losses"]
        start = state["iter"]
        log.info("resuming diffusion training at iteration %d", start)

    rows = []
    model.train()
    for it in range(start, cfg.iterations):
        lr = cosine_lr(it, cfg.iterations, cfg.lr)
        for group in opt.param_groups:
            group["lr"] = lr
        x0 = next(data).to(device)
        loss = ddpm_loss(model, x0, sched, generator=gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        result.losses.append(loss.item())
        if it % log_every == 0 or it == cfg.iterations - 1:
            row = {"iter": it, "loss": result.losses[-1], "lr": lr}
            rows.append(row)
            if progress:
                progress(row)
        if out_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 and it + 1 < cfg.iterations:
            state_path.parent.mkdir(parents=True, exist_ok=True)
            torch.save({"arch": diffusion_arch(cfg), "iter": it + 1, "model": model.state_dict(),
                        "opt": opt.state_dict(), "gen": gen.get_state(), "losses": result.losses}, state_path)
        if out_dir and cfg.sample_every and (it + 1) % cfg.sample_every == 0:
            save_sample_grid(model, sched, cfg, out_dir / "samples" / f"iter{it + 1:07d}.png", device)

    if out_dir is not None:
        save_diffusion(out_dir / "unet.safetensors", cfg, model)
        with open(out_dir / "train_log.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=("iter", "loss", "lr"))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
    return result


def save_sample_grid(model, sched, cfg: DiffusionTrainConfig, path: Path, device="cpu", n: int = 16) -> None:
    """Sample ``n`` images and tile them into a square-ish PNG grid."""
    res = cfg.unet.resolution
    steps = min(cfg.sample_steps, sched.T)
    cols = int(math.sqrt(n))
    rows = math.ceil(n / cols)
    imgs = ddim_sample(model, sched, DdimSamplerConfig(steps), n, cfg.seed, (3, res, res), device=device).cpu()
    pad = torch.full((rows * cols - n, 3, res, res), -1.0)
    grid = torch.cat([imgs, pad]).view(rows, cols, 3, res, res).permute(2, 0, 3, 1, 4).reshape(3, rows * res, cols * res)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_png(grid, path)


def save_diffusion(path: str | Path, cfg: DiffusionTrainConfig, model: UNet) -> Path:
    return save_checkpoint(path, model.state_dict(), diffusion_arch(cfg), "diffusion-unet",
                           {"iterations": cfg.iterations, "seed": cfg.seed})


def load_diffusion(path: str | Path, expect_cfg: DiffusionTrainConfig | None = None) -> tuple[UNet, NoiseSchedule]:
    expect = diffusion_arch(expect_cfg) if expect_cfg is not None else None
    ckpt = load_checkpoint(path, kind="diffusion-unet", expect_arch=expect)
    model = UNet(UNetSpec.from_dict(ckpt.arch["unet"]))
    model.load_state_dict(ckpt.state)
    model.eval()
    sched = make_schedule(ckpt.arch["T"], ckpt.arch["beta_start"], ckpt.arch["beta_end"])
    return model, sched


def generate_fakes(
    ckpt_path: str | Path,
    out_dir: str | Path,
    n: int,
    steps: int,
    seed: int,
    batch_size: int = 100,
    device: str | torch.device = "cpu",
) -> Path:
    """Sample ``n`` images, write them as PNGs and record a sampling manifest."""
    model, sched = load_diffusion(ckpt_path)
    model.to(device)
    res = model.spec.resolution
    imgs = ddim_sample(model, sched, DdimSamplerConfig(steps), n, seed, (3, res, res), batch_size, device)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(n)))
    for i, img in enumerate(imgs):
        save_png(img, out_dir / f"fake_{i:0{width}d}.png")
    manifest = {"n": n, "seed": seed, "steps": steps, "T": sched.T,
                "checkpoint_sha256": file_digest(ckpt_path), "resolution": res}
    (out_dir / "sampling.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir

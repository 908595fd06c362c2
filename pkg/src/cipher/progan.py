"""Progressive-growing GAN: equalized-lr layers, minibatch stddev, fade-in and the LSGAN loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


def stage_resolution(k: int) -> int:
    return 4 * 2 ** k


@dataclass(frozen=True)
class ProgressiveStage:
    index: int
    fade_alpha: float = 1.0
    phase: str = "stable"

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("stage index must be >= 0")
        if not 0.0 <= self.fade_alpha <= 1.0:
            raise ValueError(f"fade_alpha must lie in [0, 1], got {self.fade_alpha}")
        if self.phase not in ("fading", "stable"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase == "stable" and self.fade_alpha != 1.0:
            raise ValueError("a stable stage has fade_alpha == 1")
        if self.phase == "fading" and self.index == 0:
            raise ValueError("the 4x4 base stage has nothing to fade from")

    @property
    def resolution(self) -> int:
        return stage_resolution(self.index)

    @property
    def fading(self) -> bool:
        return self.phase == "fading"


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class WSConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size ** 2

    @property
    def runtime_scale(self) -> float:
        return math.sqrt(2.0 / self.fan_in)


def ws_conv_forward(x: torch.Tensor, spec: WSConvSpec, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Convolution with the He constant applied to the stored weights at call time."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(
            f"channel mismatch: input shape {tuple(x.shape)} vs layer expecting "
            f"{spec.in_channels} channels (weight shape {tuple(weight.shape)})"
        )
    return F.conv2d(x, weight * spec.runtime_scale, bias, stride=spec.stride, padding=spec.padding)


class WSConv2d(nn.Module):
    """Conv layer whose weights are stored at unit variance and scaled in forward."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1, padding: int | None = None):
        super().__init__()
        if padding is None:
            padding = kernel_size // 2
        self.spec = WSConvSpec(in_channels, out_channels, kernel_size, stride, padding)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x):
        return ws_conv_forward(x, self.spec, self.weight, self.bias)


class WSLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.scale = math.sqrt(2.0 / in_features)
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


def minibatch_std(x: torch.Tensor, reference: float | None = None) -> torch.Tensor:
    """Append one channel holding the batch-wide mean of per-position stddevs.

    Uses a single group over the whole batch and the population stddev. If
    ``reference`` is given it replaces the batch statistic, which makes the
    output independent of how images are grouped into batches.
    """
    n, _, h, w = x.shape
    if reference is not None:
        stat = x.new_full((), float(reference))
    else:
        var = x.var(dim=0, unbiased=False)
        # sqrt has an infinite derivative at 0; keep gradients finite for duplicated batches
        std = torch.where(var > 0, var.clamp_min(1e-30).sqrt(), torch.zeros_like(var))
        stat = std.mean()
    return torch.cat([x, stat.expand(n, 1, h, w)], dim=1)


class MinibatchStd(nn.Module):
    def __init__(self):
        super().__init__()
        self.reference: float | None = None

    def forward(self, x):
        ref = self.reference if not self.training else None
        return minibatch_std(x, ref)

    @staticmethod
    def batch_statistic(x: torch.Tensor) -> float:
        return float(minibatch_std(x)[0, -1, 0, 0])


def fade_in(old_path: torch.Tensor, new_path: torch.Tensor, alpha: float) -> torch.Tensor:
    """``alpha * new + (1 - alpha) * old``; the endpoints return an input unchanged."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"fade-in alpha must lie in [0, 1], got {alpha}")
    if old_path.shape != new_path.shape:
        raise ValueError(f"fade-in paths differ in shape: {tuple(old_path.shape)} vs {tuple(new_path.shape)}")
    if alpha == 0.0:
        return old_path
    if alpha == 1.0:
        return new_path
    return alpha * new_path + (1.0 - alpha) * old_path


def downsample(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, 2)


def upsample(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


# ---------------------------------------------------------------------------
# networks


def _lrelu(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


class DiscriminatorBlock(nn.Module):
    """Two 3x3 convs with LeakyReLU followed by 2x average pooling."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = WSConv2d(in_ch, in_ch, 3)
        self.conv2 = WSConv2d(in_ch, out_ch, 3)

    def forward(self, x):
        return downsample(_lrelu(self.conv2(_lrelu(self.conv1(x)))))


class DiscriminatorHead(nn.Module):
    """4x4 block: minibatch stddev, 3x3 conv, 4x4 valid conv, dropout, linear."""

    def __init__(self, ch: int, dropout: float = 0.0):
        super().__init__()
        self.mbstd = MinibatchStd()
        self.conv1 = WSConv2d(ch + 1, ch, 3)
        self.conv2 = WSConv2d(ch, ch, 4, padding=0)
        self.dropout = nn.Dropout(dropout)
        self.linear = WSLinear(ch, 1)

    def features(self, x):
        x = _lrelu(self.conv1(self.mbstd(x)))
        return _lrelu(self.conv2(x)).flatten(1)

    def forward(self, x):
        return self.linear(self.dropout(self.features(x))).squeeze(1)


def _check_channels(channels: Sequence[int]) -> list[int]:
    channels = [int(c) for c in channels]
    if not channels or any(c < 1 for c in channels):
        raise ValueError(f"channel widths must be positive, got {channels}")
    if len(channels) > 5:
        raise ValueError("at most five stages (4x4 .. 64x64) are supported")
    return channels


class Discriminator(nn.Module):
    """Progressive discriminator; ``channels[k]`` is the width at stage k (resolution 4*2^k).

    The network's raw output is a logit for "real"; :meth:`forward` returns
    the sigmoid probability.
    """

    def __init__(self, channels: Sequence[int], dropout: float = 0.0):
        super().__init__()
        self.channels = _check_channels(channels)
        self.from_rgb = nn.ModuleList(WSConv2d(3, c, 1) for c in self.channels)
        self.blocks = nn.ModuleList(
            DiscriminatorBlock(self.channels[k], self.channels[k - 1]) for k in range(1, len(self.channels))
        )
        self.head = DiscriminatorHead(self.channels[0], dropout)

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    @property
    def max_resolution(self) -> int:
        return stage_resolution(self.num_stages - 1)

    def arch(self) -> dict:
        return {"net": "progan-discriminator", "channels": self.channels}

    def final_stage(self) -> ProgressiveStage:
        return ProgressiveStage(self.num_stages - 1)

    def block(self, k: int) -> DiscriminatorBlock:
        """Block that maps stage k features to stage k-1 (k >= 1)."""
        return self.blocks[k - 1]

    def logits(self, x: torch.Tensor, stage: ProgressiveStage | None = None, taps: dict | None = None) -> torch.Tensor:
        stage = stage or self.final_stage()
        s = stage.index
        if s >= self.num_stages:
            raise ValueError(f"stage {s} exceeds the {self.num_stages} configured stages")
        if x.ndim != 4 or x.shape[-1] != stage.resolution or x.shape[-2] != stage.resolution:
            raise ValueError(f"expected {stage.resolution}x{stage.resolution} inputs for stage {s}, got {tuple(x.shape)}")
        h = _lrelu(self.from_rgb[s](x))
        if s > 0:
            h = self.block(s)(h)
            if stage.fading:
                old = _lrelu(self.from_rgb[s - 1](downsample(x)))
                h = fade_in(old, h, stage.fade_alpha)
            if taps is not None:
                taps[f"block{s}"] = h
        for k in range(s - 1, 0, -1):
            h = self.block(k)(h)
            if taps is not None:
                taps[f"block{k}"] = h
        if taps is not None:
            taps["final"] = self.head.features(h)
        return self.head(h)

    def forward(self, x, stage: ProgressiveStage | None = None):
        return torch.sigmoid(self.logits(x, stage))


def discriminator_forward(batch: torch.Tensor, stage: ProgressiveStage, disc: Discriminator) -> torch.Tensor:
    return disc(batch, stage)


class GeneratorBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = WSConv2d(in_ch, out_ch, 3)
        self.conv2 = WSConv2d(out_ch, out_ch, 3)
        self.norm = PixelNorm()

    def forward(self, x):
        x = upsample(x)
        x = self.norm(_lrelu(self.conv1(x)))
        return self.norm(_lrelu(self.conv2(x)))


class Generator(nn.Module):
    """Mirror of :class:`Discriminator`: latent -> 4x4 -> ... with toRGB per stage."""

    def __init__(self, channels: Sequence[int], latent_dim: int = 256):
        super().__init__()
        self.channels = _check_channels(channels)
        self.latent_dim = latent_dim
        c0 = self.channels[0]
        self.norm = PixelNorm()
        self.input = WSLinear(latent_dim, c0 * 16)
        self.conv0 = WSConv2d(c0, c0, 3)
        self.blocks = nn.ModuleList(
            GeneratorBlock(self.channels[k - 1], self.channels[k]) for k in range(1, len(self.channels))
        )
        self.to_rgb = nn.ModuleList(WSConv2d(c, 3, 1) for c in self.channels)

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def arch(self) -> dict:
        return {"net": "progan-generator", "channels": self.channels, "latent_dim": self.latent_dim}

    def forward(self, z: torch.Tensor, stage: ProgressiveStage | None = None) -> torch.Tensor:
        stage = stage or ProgressiveStage(self.num_stages - 1)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"latent batch must be N x {self.latent_dim}, got {tuple(z.shape)}")
        s = stage.index
        if s >= self.num_stages:
            raise ValueError(f"stage {s} exceeds the {self.num_stages} configured stages")
        h = _lrelu(self.input(self.norm(z))).view(-1, self.channels[0], 4, 4)
        h = self.norm(h)
        h = self.norm(_lrelu(self.conv0(h)))
        for k in range(1, s):
            h = self.blocks[k - 1](h)
        if s == 0:
            return torch.tanh(self.to_rgb[0](h))
        prev = h
        h = self.blocks[s - 1](prev)
        new_rgb = torch.tanh(self.to_rgb[s](h))
        if not stage.fading:
            return new_rgb
        old_rgb = upsample(torch.tanh(self.to_rgb[s - 1](prev)))
        return fade_in(old_rgb, new_rgb, stage.fade_alpha)


def generator_forward(z: torch.Tensor, stage: ProgressiveStage, gen: Generator) -> torch.Tensor:
    return gen(z, stage)


def mse_adv_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN losses on sigmoid outputs (targets 1 = real, 0 = fake)."""
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("loss inputs must be nonempty")
    loss_d = ((d_real - 1) ** 2).mean() + (d_fake ** 2).mean()
    loss_g = ((d_fake - 1) ** 2).mean()
    return loss_d, loss_g


# ---------------------------------------------------------------------------
# training


@dataclass
class GanTrainConfig:
    channels: list[int] = field(default_factory=lambda: [256, 256, 256, 128, 64])
    latent_dim: int = 256
    batch_size: int = 16
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    lr: float = 1e-3
    iters_per_stage: int = 50_000
    fade_iters: int = 10_000
    gd_ratio: int = 2
    seed: int = 42
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.fade_iters > self.iters_per_stage:
            raise ValueError("fade_iters must not exceed iters_per_stage")
        for name in ("batch_size", "iters_per_stage", "gd_ratio", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.fade_iters < 0 or self.checkpoint_every < 0:
            raise ValueError("fade_iters and checkpoint_every must be >= 0")

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def total_iters(self) -> int:
        return self.stages * self.iters_per_stage


def fade_alpha_at(k: int, i: int, fade_iters: int) -> float:
    """Blend factor at iteration ``i`` (0-based) of stage ``k``."""
    if k == 0 or fade_iters == 0 or i >= fade_iters:
        return 1.0
    return i / fade_iters


def stage_at(k: int, i: int, fade_iters: int) -> ProgressiveStage:
    a = fade_alpha_at(k, i, fade_iters)
    return ProgressiveStage(k, a, "stable" if a == 1.0 else "fading")


def linear_lr(base: float, step: int, total: int) -> float:
    return base * (1.0 - step / total)


@dataclass
class GanResult:
    generator: Generator
    discriminator: Discriminator
    d_steps: int = 0
    g_steps: int = 0
    log_rows: list[dict] = field(default_factory=list)


def gan_arch(cfg: GanTrainConfig) -> dict:
    return {"channels": list(cfg.channels), "latent_dim": cfg.latent_dim}


def _resize_to(x: torch.Tensor, res: int) -> torch.Tensor:
    while x.shape[-1] > res:
        x = downsample(x)
    return x


LOG_FIELDS = ("iter", "stage", "fade_alpha", "loss_d", "loss_g", "lr")


def train_progressive(
    cfg: GanTrainConfig,
    data: Iterator[torch.Tensor],
    out_dir: str | Path | None = None,
    resume: bool = False,
    progress: Callable[[dict], None] | None = None,
    log_every: int = 50,
) -> GanResult:
    """Train all stages k = 0 .. stages-1 and return the final networks.

    One iteration is one discriminator update followed by ``gd_ratio``
    generator updates. Learning rate decays linearly from ``cfg.lr`` to 0
    over the whole multi-stage budget. Real images drawn from ``data`` must
    be at least as large as the final stage; they are average-pooled down
    and, while a stage fades in, blended with their upsampled coarse version
    so real and fake pass through the same pathway.
    """
    torch.manual_seed(cfg.seed)
    gen = Generator(cfg.channels, cfg.latent_dim)
    disc = Discriminator(cfg.channels)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    noise = torch.Generator().manual_seed(cfg.seed)
    result = GanResult(gen, disc)
    start = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    state_path = out_dir / "train_state.pt" if out_dir else None
    if resume and state_path is not None and state_path.is_file():
        start = _load_train_state(state_path, cfg, result, opt_g, opt_d, noise)
        log.info("resuming GAN training at iteration %d", start)

    final_res = stage_resolution(cfg.stages - 1)
    total = cfg.total_iters
    for it in range(start, total):
        k, i = divmod(it, cfg.iters_per_stage)
        stage = stage_at(k, i, cfg.fade_iters)
        lr = linear_lr(cfg.lr, it, total)
        for opt in (opt_g, opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

        real = next(data)
        if real.shape[-1] < final_res:
            raise ValueError(f"real images are {real.shape[-1]}px but the final stage needs {final_res}px")
        real = _resize_to(real, stage.resolution)
        if stage.fading:
            real = fade_in(upsample(downsample(real)), real, stage.fade_alpha)
        n = real.shape[0]

        z = torch.randn(n, cfg.latent_dim, generator=noise)
        with torch.no_grad():
            fake = gen(z, stage)
        loss_d, _ = mse_adv_losses(disc(real, stage), disc(fake, stage))
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()
        result.d_steps += 1

        for _ in range(cfg.gd_ratio):
            z = torch.randn(n, cfg.latent_dim, generator=noise)
            _, loss_g = mse_adv_losses(torch.ones(1), disc(gen(z, stage), stage))
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()
            result.g_steps += 1

        if it % log_every == 0 or it == total - 1:
            row = {"iter": it, "stage": k, "fade_alpha": stage.fade_alpha, "loss_d": loss_d.item(),
                   "loss_g": loss_g.item(), "lr": lr}
            result.log_rows.append(row)
            if progress:
                progress(row)
        if out_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 and it + 1 < total:
            _save_train_state(state_path, cfg, result, opt_g, opt_d, noise, it + 1)

    if out_dir is not None:
        save_gan(out_dir, cfg, result)
    return result


def _save_train_state(path, cfg, result, opt_g, opt_d, noise, next_iter):
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "arch": gan_arch(cfg), "iter": next_iter, "gen": result.generator.state_dict(),
        "disc": result.discriminator.state_dict(), "opt_g": opt_g.state_dict(), "opt_d": opt_d.state_dict(),
        "noise": noise.get_state(), "torch_rng": torch.get_rng_state(),
        "d_steps": result.d_steps, "g_steps": result.g_steps, "log": result.log_rows,
    }, path)


def _load_train_state(path, cfg, result, opt_g, opt_d, noise) -> int:
    state = torch.load(path, weights_only=False)
    if state["arch"] != gan_arch(cfg):
        raise CheckpointError(f"cannot resume from {path}: architecture {state['arch']} != {gan_arch(cfg)}")
    result.generator.load_state_dict(state["gen"])
    result.discriminator.load_state_dict(state["disc"])
    opt_g.load_state_dict(state["opt_g"])
    opt_d.load_state_dict(state["opt_d"])
    noise.set_state(state["noise"])
    torch.set_rng_state(state["torch_rng"])
    result.d_steps, result.g_steps, result.log_rows = state["d_steps"], state["g_steps"], state["log"]
    return state["iter"]


def save_gan(out_dir: str | Path, cfg: GanTrainConfig, result: GanResult) -> None:
    out_dir = Path(out_dir)
    meta = {"stages": cfg.stages, "iters": cfg.total_iters, "d_steps": result.d_steps, "g_steps": result.g_steps}
    save_discriminator(out_dir / "discriminator.safetensors", result.discriminator, meta)
    save_checkpoint(out_dir / "generator.safetensors", result.generator.state_dict(), result.generator.arch(),
                    "progan-generator", meta)
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in result.log_rows:
            writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


def save_discriminator(path: str | Path, disc: Discriminator, meta: dict | None = None) -> Path:
    return save_checkpoint(path, disc.state_dict(), disc.arch(), "progan-discriminator", meta)


def load_discriminator(path: str | Path, channels: Sequence[int] | None = None) -> tuple[Discriminator, Checkpoint]:
    expect = {"net": "progan-discriminator", "channels": list(channels)} if channels is not None else None
    ckpt = load_checkpoint(path, kind="progan-discriminator", expect_arch=expect)
    disc = Discriminator(ckpt.arch["channels"])
    disc.load_state_dict(ckpt.state)
    return disc, ckpt


def load_generator(path: str | Path) -> Generator:
    ckpt = load_checkpoint(path, kind="progan-generator")
    gen = Generator(ckpt.arch["channels"], ckpt.arch["latent_dim"])
    gen.load_state_dict(ckpt.state)
    return gen

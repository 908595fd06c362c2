"""Noise-prediction U-Net with sinusoidal timestep conditioning."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.checkpoint import checkpoint


def timestep_embedding(t: torch.Tensor | float, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Interleaved ``[sin(t f_0), cos(t f_0), sin(t f_1), ...]`` with f_i = max_period^(-i/(dim/2)).

    ``t`` may be a scalar or a 1-D tensor; the result is ``len(t) x dim``.
    """
    if dim % 2:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    phase = t[:, None] * freqs[None]
    emb = torch.stack([phase.sin(), phase.cos()], dim=-1).reshape(len(t), dim)
    return emb.to(torch.get_default_dtype())


def group_count(channels: int, max_groups: int = 32) -> int:
    """min(32, channels), walked down to a divisor of ``channels``."""
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(group_count(ch), ch)


class ResidualBlock(nn.Module):
    """GN -> SiLU -> conv -> timestep injection (adaptive GN) -> SiLU -> conv, plus skip."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, dropout: float = 0.0):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * out_ch)
        self.norm2 = _norm(out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(self.dropout(F.silu(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    """Single-head self-attention over all spatial positions, residual."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = _norm(ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("ncq,nck->nqk", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("nqk,nck->ncq", attn, v).reshape(n, c, h, w)
        return x + self.proj(out)


@dataclass(frozen=True)
class UNetSpec:
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_resolutions: tuple[int, ...] = (32,)
    resolution: int = 64
    num_res_blocks: int = 2
    emb_dim: int = 256
    in_channels: int = 3
    dropout: float = 0.0

    @property
    def depth(self) -> int:
        return len(self.channel_multipliers)

    def level_resolutions(self) -> list[int]:
        return [self.resolution // 2 ** i for i in range(self.depth)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        d = dict(d)
        d["channel_multipliers"] = tuple(d["channel_multipliers"])
        d["attention_resolutions"] = tuple(d["attention_resolutions"])
        return cls(**d)


class UNet(nn.Module):
    """Encoder/decoder with one skip per residual block, concatenated on the way up.

    Attention is applied once per level (after that level's residual blocks)
    at every resolution listed in ``spec.attention_resolutions``, and in the
    middle block when the bottleneck resolution is listed.
    """

    def __init__(self, spec: UNetSpec, grad_checkpoint: bool = False):
        super().__init__()
        self.spec = spec
        self.grad_checkpoint = grad_checkpoint
        if spec.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        emb_dim = spec.emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        base = spec.base_channels
        self.conv_in = nn.Conv2d(spec.in_channels, base, 3, padding=1)
        res = spec.level_resolutions()

        skip_ch = [base]
        ch = base
        self.down = nn.ModuleList()
        for lvl, mult in enumerate(spec.channel_multipliers):
            out = base * mult
            blocks = nn.ModuleList()
            for _ in range(spec.num_res_blocks):
                blocks.append(ResidualBlock(ch, out, emb_dim, spec.dropout))
                ch = out
                skip_ch.append(ch)
            level = nn.Module()
            level.blocks = blocks
            level.attn = SelfAttention(ch) if res[lvl] in spec.attention_resolutions else None
            level.downsample = nn.Conv2d(ch, ch, 3, stride=2, padding=1) if lvl < spec.depth - 1 else None
            if level.downsample is not None:
                skip_ch.append(ch)
            self.down.append(level)

        self.mid1 = ResidualBlock(ch, ch, emb_dim, spec.dropout)
        self.mid_attn = SelfAttention(ch) if res[-1] in spec.attention_resolutions else None
        self.mid2 = ResidualBlock(ch, ch, emb_dim, spec.dropout)

        self.up = nn.ModuleList()
        self.concat_channels: list[int] = []
        for lvl in reversed(range(spec.depth)):
            out = base * spec.channel_multipliers[lvl]
            blocks = nn.ModuleList()
            for _ in range(spec.num_res_blocks + 1):
                sc = skip_ch.pop()
                self.concat_channels.append(ch + sc)
                blocks.append(ResidualBlock(ch + sc, out, emb_dim, spec.dropout))
                ch = out
            level = nn.Module()
            level.blocks = blocks
            level.attn = SelfAttention(ch) if res[lvl] in spec.attention_resolutions else None
            level.upsample = nn.Conv2d(ch, ch, 3, padding=1) if lvl > 0 else None
            self.up.append(level)
        assert not skip_ch
        self.norm_out = _norm(ch)
        self.conv_out = nn.Conv2d(ch, spec.in_channels, 3, padding=1)

    def attention_modules(self) -> list[SelfAttention]:
        return [m for m in self.modules() if isinstance(m, SelfAttention)]

    def _block(self, block, h, emb):
        if self.grad_checkpoint and self.training:
            return checkpoint(block, h, emb, use_reentrant=False)
        return block(h, emb)

    def forward(self, x: torch.Tensor, t: torch.Tensor, taps: dict | None = None) -> torch.Tensor:
        n, _, hgt, wid = x.shape
        factor = 2 ** (self.spec.depth - 1)
        if hgt % factor or wid % factor:
            raise ValueError(f"spatial size {hgt}x{wid} is not divisible by {factor}")
        t = torch.as_tensor(t, device=x.device).reshape(-1)
        if t.numel() == 1 and n > 1:
            t = t.expand(n)
        emb = self.time_mlp(timestep_embedding(t, self.spec.emb_dim).to(x.dtype).to(x.device))

        h = self.conv_in(x)
        skips = [h]
        for lvl, level in enumerate(self.down):
            for block in level.blocks:
                h = self._block(block, h, emb)
                skips.append(h)
            if level.attn is not None:
                h = level.attn(h)
                skips[-1] = h
            if taps is not None:
                taps[f"enc{lvl}"] = h
            if level.downsample is not None:
                h = level.downsample(h)
                skips.append(h)

        h = self._block(self.mid1, h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self._block(self.mid2, h, emb)
        if taps is not None:
            taps["mid"] = h

        for level in self.up:
            for block in level.blocks:
                h = self._block(block, torch.cat([h, skips.pop()], dim=1), emb)
            if level.attn is not None:
                h = level.attn(h)
            if level.upsample is not None:
                h = level.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def unet_forward(x_t: torch.Tensor, t: torch.Tensor, model: UNet) -> torch.Tensor:
    return model(x_t, t)

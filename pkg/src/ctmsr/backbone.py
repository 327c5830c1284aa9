"""Trainable denoiser F_theta and the parameter-set utilities around it.

The network is a small conv UNet: pixel-unshuffle stem, three resolution
levels of residual blocks (group norm, sinusoidal time embedding added per
block), nearest-neighbour upsampling and a zero-initialised output conv
followed by pixel shuffle back to full resolution.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedules import ScheduleConfig, noise_level, time_fraction


class NumericError(FloatingPointError):
    """Non-finite value where a finite one was required."""


@dataclass(frozen=True)
class BackboneSpec:
    base_channels: int = 32
    depth: int = 2
    downsample_factor: int = 2
    time_embed_dim: int = 32
    image_channels: int = 3
    channel_mult: tuple = (1, 1, 2)

    def __post_init__(self):
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.base_channels % 8:
            raise ValueError("base_channels must be a multiple of 8 (group norm)")
        if min(self.base_channels, self.depth, self.downsample_factor, self.image_channels) < 1:
            raise ValueError("backbone sizes must be positive")
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))

    @property
    def in_channels(self) -> int:
        return 2 * self.image_channels

    @property
    def spatial_multiple(self) -> int:
        """Image sides must be divisible by this."""
        return self.downsample_factor * 2 ** (len(self.channel_mult) - 1)


def timestep_embedding(frac: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    # frac in [0, 1]; stretched to [0, 1000] so low frequencies still resolve a 3-4 step grid
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=frac.dtype, device=frac.device) / half
    )
    args = 1000.0 * frac[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """F_theta(x_t, y0, t/T): conditioning by channel concatenation."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        r = spec.downsample_factor
        emb_dim = 4 * spec.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(spec.time_embed_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        chans = [spec.base_channels * m for m in spec.channel_mult]
        self.stem = nn.Conv2d(spec.in_channels * r * r, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        skip_chans = []
        ch = chans[0]
        for level, out_ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(spec.depth):
                blocks.append(ResBlock(ch, out_ch, emb_dim))
                ch = out_ch
            self.down.append(blocks)
            skip_chans.append(ch)
        self.mid = ResBlock(ch, ch, emb_dim)

        self.up = nn.ModuleList()
        for level in reversed(range(len(chans))):
            blocks = nn.ModuleList()
            for i in range(spec.depth):
                in_ch = ch + skip_chans[level] if i == 0 else chans[level]
                blocks.append(ResBlock(in_ch, chans[level], emb_dim))
                ch = chans[level]
            self.up.append(blocks)

        self.out_norm = nn.GroupNorm(8, ch)
        self.out_conv = nn.Conv2d(ch, spec.image_channels * r * r, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        # time-dependent 1x1 linear path from the input, so F can cancel c_skip * x_t exactly
        self.input_mix = nn.Linear(emb_dim, spec.image_channels * spec.in_channels)
        nn.init.zeros_(self.input_mix.weight)
        nn.init.zeros_(self.input_mix.bias)

    def forward(self, x_t, y0, frac):
        emb = self.time_mlp(timestep_embedding(frac, self.spec.time_embed_dim))
        inp = torch.cat([x_t, y0], dim=1)
        mix = self.input_mix(emb).view(-1, self.spec.image_channels, self.spec.in_channels)
        h = F.pixel_unshuffle(inp, self.spec.downsample_factor)
        h = self.stem(h)
        skips = []
        n_levels = len(self.down)
        for level, blocks in enumerate(self.down):
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
            if level < n_levels - 1:
                h = F.avg_pool2d(h, 2)
        h = self.mid(h, emb)
        for i, blocks in enumerate(self.up):
            level = n_levels - 1 - i
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.cat([h, skips[level]], dim=1)
            for block in blocks:
                h = block(h, emb)
        h = self.out_conv(F.silu(self.out_norm(h)))
        return F.pixel_shuffle(h, self.spec.downsample_factor) + torch.einsum("boi,bihw->bohw", mix, inp)


class ConsistencyModel(nn.Module):
    """Backbone plus the schedule needed to wrap it as f_theta.

    ``backbone_calls`` counts backbone evaluations (one per batch element), so
    inference drivers can assert the one-step contract.
    """

    def __init__(self, spec: BackboneSpec, schedule: ScheduleConfig):
        super().__init__()
        self.spec = spec
        self.schedule = schedule
        self.backbone = Denoiser(spec)
        self.backbone_calls = 0

    def forward(self, x_t, y0, t, schedule: ScheduleConfig | None = None):
        return forward(self, x_t, y0, t, schedule)


def _as_batch_steps(t, n, device):
    if isinstance(t, torch.Tensor):
        t = t.to(device=device, dtype=torch.long).reshape(-1)
        return t.expand(n) if t.numel() == 1 else t
    return torch.full((n,), int(t), dtype=torch.long, device=device)


def forward(model: ConsistencyModel, x_t, y0, t, schedule: ScheduleConfig | None = None):
    """Raw backbone output F_theta(x_t, y0, t) before skip/out scaling."""
    schedule = schedule or model.schedule
    if x_t.shape != y0.shape:
        raise ValueError(f"x_t shape {tuple(x_t.shape)} != y0 shape {tuple(y0.shape)}")
    unbatched = x_t.dim() == 3
    if unbatched:
        x_t, y0 = x_t[None], y0[None]
    if x_t.dim() != 4 or x_t.shape[1] != model.spec.image_channels:
        raise ValueError(f"expected (N, {model.spec.image_channels}, H, W) images, got {tuple(x_t.shape)}")
    m = model.spec.spatial_multiple
    if x_t.shape[-1] % m or x_t.shape[-2] % m:
        raise ValueError(f"image sides must be divisible by {m}, got {tuple(x_t.shape[-2:])}")
    steps = _as_batch_steps(t, x_t.shape[0], x_t.device)
    frac = time_fraction(steps, schedule, dtype=x_t.dtype)
    sigma = noise_level(steps, schedule, dtype=x_t.dtype)
    c_in = (sigma**2 + schedule.sigma_data**2).rsqrt().reshape(-1, 1, 1, 1)
    out = model.backbone(c_in * x_t, y0, frac)
    model.backbone_calls += x_t.shape[0]
    if not torch.isfinite(out).all():
        raise NumericError("backbone produced non-finite activations")
    return out[0] if unbatched else out


def init_params(spec: BackboneSpec, seed: int, schedule: ScheduleConfig | None = None,
                dtype=torch.float32) -> ConsistencyModel:
    """Deterministically initialised model; output conv is zero so F starts at 0."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ConsistencyModel(spec, schedule or ScheduleConfig())
    return model.to(dtype)


def snapshot(model: ConsistencyModel) -> ConsistencyModel:
    """Frozen deep copy (theta' / theta^-): no gradient ever reaches the source."""
    frozen = copy.deepcopy(model)
    frozen.requires_grad_(False)
    frozen.eval()
    frozen.backbone_calls = 0
    return frozen


def parameter_count(model: ConsistencyModel) -> int:
    return sum(p.numel() for p in model.parameters())

"""Residual-shifting forward process, the f_theta wrapper and one-step SR."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .backbone import ConsistencyModel, forward as backbone_forward
from .schedules import ScheduleConfig, ScheduleDomainError, noise_level, residual_level, skip_out_scales


@dataclass
class SRPair:
    """HR target ``x0``, HR-grid conditioner ``y0`` and the raw LR image.

    Arrays are ``(C, H, W)`` or batched ``(N, C, H, W)`` tensors in [-1, 1].
    """

    x0: torch.Tensor
    y0: torch.Tensor
    lr: torch.Tensor | None = None

    def __post_init__(self):
        if self.x0.shape != self.y0.shape:
            raise ValueError(f"x0 shape {tuple(self.x0.shape)} != y0 shape {tuple(self.y0.shape)}")

    @property
    def residual(self) -> torch.Tensor:
        """e0 = y0 - x0."""
        return self.y0 - self.x0

    def __len__(self):
        return self.x0.shape[0] if self.x0.dim() == 4 else 1

    def subset(self, index) -> "SRPair":
        lr = None if self.lr is None else self.lr[index]
        return SRPair(self.x0[index], self.y0[index], lr)


@dataclass
class LatentState:
    x_t: torch.Tensor
    t: int | torch.Tensor
    noise: torch.Tensor


def _per_sample(value, ref: torch.Tensor):
    """Broadcast a scalar or per-sample schedule value against an image batch."""
    if isinstance(value, torch.Tensor) and value.dim() > 0:
        if ref.dim() == 4:
            return value.to(ref.dtype).reshape(-1, 1, 1, 1)
        return value.to(ref.dtype).reshape(())
    return value


def forward_mix(x0, y0, t, noise, cfg: ScheduleConfig):
    """x_t = x0 + alpha(t) (y0 - x0) + sigma(t) eps, for any image (real or generated)."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != image shape {tuple(x0.shape)}")
    alpha = _per_sample(residual_level(t, cfg, dtype=x0.dtype), x0)
    sigma = _per_sample(noise_level(t, cfg, dtype=x0.dtype), x0)
    return x0 + alpha * (y0 - x0) + sigma * noise


def sample_forward(pair: SRPair, t, noise: torch.Tensor, cfg: ScheduleConfig) -> LatentState:
    return LatentState(forward_mix(pair.x0, pair.y0, t, noise, cfg), t, noise)


def adjacent_pair(pair: SRPair, t, noise: torch.Tensor, cfg: ScheduleConfig,
                  prev_noise: torch.Tensor | None = None):
    """States at ``t - 1`` and ``t``.

    Both share ``noise`` unless ``prev_noise`` is given for the ``t - 1`` state.
    """
    t_min = int(t.min()) if isinstance(t, torch.Tensor) else t
    if t_min < 1:
        raise ScheduleDomainError("adjacent_pair needs t >= 1")
    prev_noise = noise if prev_noise is None else prev_noise
    return sample_forward(pair, t - 1, prev_noise, cfg), sample_forward(pair, t, noise, cfg)


def consistency_output(model: ConsistencyModel, x_t, y0, t, cfg: ScheduleConfig | None = None):
    """f_theta(x_t, y0, t) = c_skip(t) x_t + c_out(t) F_theta(x_t, y0, t)."""
    cfg = cfg or model.schedule
    c_skip, c_out = skip_out_scales(t, cfg, dtype=x_t.dtype)
    raw = backbone_forward(model, x_t, y0, t, cfg)
    return _per_sample(c_skip, x_t) * x_t + _per_sample(c_out, x_t) * raw


def terminal_state(y0: torch.Tensor, noise: torch.Tensor, cfg: ScheduleConfig) -> torch.Tensor:
    """x_T = y0 + sigma_max eps."""
    if noise.shape != y0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != y0 shape {tuple(y0.shape)}")
    return y0 + cfg.sigma_max * noise


def one_step_sr(model: ConsistencyModel, y0: torch.Tensor, noise: torch.Tensor,
                cfg: ScheduleConfig | None = None) -> torch.Tensor:
    """Map a noisy LR conditioner to an HR estimate with one backbone call.

    The raw (unclamped) output is returned; clamp only when writing files.
    """
    cfg = cfg or model.schedule
    x_T = terminal_state(y0, noise, cfg)
    return consistency_output(model, x_T, y0, cfg.total_steps, cfg)

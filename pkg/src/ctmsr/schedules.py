"""Noise/residual schedules, consistency scalings and the step curriculum.

All timesteps live on the integer grid ``0..T``. Functions accept either a
Python ``int`` (returning ``float``) or an integer tensor (returning a tensor
of the default float dtype or of ``dtype``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Union

import torch

Step = Union[int, torch.Tensor]


class ScheduleDomainError(ValueError):
    """Raised when a timestep falls outside ``[0, T]``."""


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int = 3
    sigma_max: float = 2.0
    rho_n: float = 1.0
    rho_r: float = 1.0
    sigma_data: float = 0.5

    def __post_init__(self):
        if int(self.total_steps) != self.total_steps or self.total_steps < 2:
            raise ValueError(f"total_steps must be an integer >= 2, got {self.total_steps}")
        for name in ("sigma_max", "rho_n", "rho_r", "sigma_data"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a positive finite number, got {value}")

    def with_steps(self, total_steps: int) -> "ScheduleConfig":
        return replace(self, total_steps=int(total_steps))


@dataclass(frozen=True)
class StepCurriculum:
    s0: int = 4
    s1: int = 3
    K: int = 5000

    def __post_init__(self):
        if not self.s0 >= self.s1 >= 2:
            raise ValueError(f"need s0 >= s1 >= 2, got s0={self.s0}, s1={self.s1}")
        if self.K < self.s0 - self.s1 + 1:
            raise ValueError(f"K={self.K} too small for s0={self.s0}, s1={self.s1}")

    @property
    def stage_length(self) -> int:
        """Iterations spent at each step count before decrementing (K')."""
        return self.K // (self.s0 - self.s1 + 1)


def _check_domain(t: Step, cfg: ScheduleConfig) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() and (bool((t < 0).any()) or bool((t > cfg.total_steps).any())):
            raise ScheduleDomainError(f"timesteps must lie in [0, {cfg.total_steps}]")
    elif not 0 <= t <= cfg.total_steps:
        raise ScheduleDomainError(f"timestep {t} outside [0, {cfg.total_steps}]")


def _fraction(t: Step, cfg: ScheduleConfig, dtype=None):
    _check_domain(t, cfg)
    if isinstance(t, torch.Tensor):
        return t.to(dtype or torch.get_default_dtype()) / cfg.total_steps
    return t / cfg.total_steps


def time_fraction(t: Step, cfg: ScheduleConfig, dtype=None):
    """Position ``t / T`` along the trajectory; what the backbone is conditioned on."""
    return _fraction(t, cfg, dtype)


def noise_level(t: Step, cfg: ScheduleConfig, dtype=None):
    """sigma(t) = sigma_max * (t / T) ** rho_n."""
    frac = _fraction(t, cfg, dtype)
    return cfg.sigma_max * frac**cfg.rho_n


def residual_level(t: Step, cfg: ScheduleConfig, dtype=None):
    """alpha(t) = (t / T) ** rho_r."""
    frac = _fraction(t, cfg, dtype)
    return frac**cfg.rho_r


def skip_out_scales(t: Step, cfg: ScheduleConfig, dtype=None):
    """Return ``(c_skip, c_out)`` with c_skip(0) = 1 and c_out(0) = 0 exactly."""
    sigma = noise_level(t, cfg, dtype)
    sd2 = cfg.sigma_data**2
    if isinstance(sigma, torch.Tensor):
        denom = sigma**2 + sd2
        return sd2 / denom, cfg.sigma_data * sigma / torch.sqrt(denom)
    denom = sigma**2 + sd2
    return sd2 / denom, cfg.sigma_data * sigma / math.sqrt(denom)


def curriculum_steps(k: int, cur: StepCurriculum) -> int:
    """T(k) = max(s0 - floor(k / K'), s1)."""
    if k < 0:
        raise ValueError(f"iteration must be non-negative, got {k}")
    return max(cur.s0 - k // cur.stage_length, cur.s1)

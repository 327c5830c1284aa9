"""Consistency metric, CT loss, trajectory-matching (DTM) and SDS gradients."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F

from .backbone import ConsistencyModel
from .diffusion import SRPair, adjacent_pair, consistency_output, forward_mix
from .schedules import ScheduleConfig

PROXY_SEED = 1234
PROXY_SCALES = 3
PROXY_FILTERS = 16


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda_ct: float = 1.0
    lambda_dtm: float = 1.6
    charbonnier_eps: float = 1e-3
    # relative: the absolute floor on ||x_hat0 - x0||_1 is omega_floor * C * S
    omega_floor: float = 1e-8

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda_ct", "lambda_dtm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.charbonnier_eps <= 0 or self.omega_floor <= 0:
            raise ValueError("charbonnier_eps and omega_floor must be positive")


@dataclass
class DtmContext:
    teacher: ConsistencyModel
    t_min: int
    t_max: int
    schedule: ScheduleConfig | None = None

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = self.teacher.schedule
        if not 1 <= self.t_min <= self.t_max <= self.schedule.total_steps:
            raise ValueError(
                f"need 1 <= t_min <= t_max <= T, got {self.t_min}, {self.t_max}, T={self.schedule.total_steps}"
            )


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def charbonnier(a, b, eps: float = 1e-3):
    """Mean over elements of sqrt((a - b)^2 + eps^2)."""
    _check_shapes(a, b)
    return torch.sqrt((a - b) ** 2 + eps**2).mean()


@lru_cache(maxsize=32)
def _proxy_filters(seed: int, channels: int, dtype: torch.dtype):
    gen = torch.Generator().manual_seed(seed)
    filters = []
    for _ in range(PROXY_SCALES):
        w = torch.randn(PROXY_FILTERS, channels, 3, 3, generator=gen, dtype=torch.float64)
        w = w / w.flatten(1).norm(dim=1)[:, None, None, None]
        filters.append(w.to(dtype))
    return tuple(filters)


def _proxy_features(x, filters):
    feats = []
    for scale, w in enumerate(filters):
        xs = F.avg_pool2d(x, 2**scale) if scale else x
        feats.append((xs, F.leaky_relu(F.conv2d(xs, w.to(x.device), padding=1), 0.2)))
    return feats


def perceptual_proxy(a, b, seed: int = PROXY_SEED):
    """Deterministic stand-in for LPIPS.

    Mean squared distance between multi-scale features (the pooled image and
    16 fixed random 3x3 filters passed through a leaky ReLU), averaged over
    three scales. Zero iff ``a == b``.
    """
    _check_shapes(a, b)
    if a.dim() == 3:
        a, b = a[None], b[None]
    filters = _proxy_filters(seed, a.shape[1], a.dtype)
    total = 0.0
    for (ia, fa), (ib, fb) in zip(_proxy_features(a, filters), _proxy_features(b, filters)):
        total = total + ((ia - ib) ** 2).mean() + ((fa - fb) ** 2).mean()
    return total / len(filters)


def metric_d(a, b, w: LossWeights):
    """d(a, b) = lambda1 * perceptual + lambda2 * Charbonnier."""
    value = w.lambda2 * charbonnier(a, b, w.charbonnier_eps)
    if w.lambda1:
        value = value + w.lambda1 * perceptual_proxy(a, b)
    return value


def ct_loss(online: ConsistencyModel, pair: SRPair, t, noise, w: LossWeights,
            cfg: ScheduleConfig | None = None, prev_noise=None):
    """Consistency loss between adjacent trajectory points.

    The target f(x_{t-1}, y0, t-1) is evaluated on the same parameters under
    ``no_grad`` (theta^- = stopgrad(theta)). ``prev_noise`` gives the target
    point its own noise draw; by default both points share ``noise``.
    """
    cfg = cfg or online.schedule
    prev, cur = adjacent_pair(pair, t, noise, cfg, prev_noise)
    estimate = consistency_output(online, cur.x_t, pair.y0, cur.t, cfg)
    with torch.no_grad():
        target = consistency_output(online, prev.x_t, pair.y0, prev.t, cfg)
    return metric_d(estimate, target.detach(), w)


def omega(x_hat0, x0, floor: float | None = None):
    """C*S / max(||x_hat0 - x0||_1, floor), per image for batched input."""
    _check_shapes(x_hat0, x0)
    per_image = x0[0].numel() if x0.dim() == 4 else x0.numel()
    if floor is None:
        floor = 1e-8 * per_image
    diff = (x_hat0 - x0).abs()
    l1 = diff.flatten(1).sum(dim=1) if x0.dim() == 4 else diff.sum()
    return per_image / l1.clamp_min(floor)


def _broadcast(weight, ref):
    return weight.reshape(-1, 1, 1, 1) if ref.dim() == 4 else weight


@torch.no_grad()
def _perturbed_pair(x_hat0, pair: SRPair, t, noise, cfg):
    # real and fake states share eps; e_hat0 = y0 - x_hat0
    x_t = forward_mix(pair.x0, pair.y0, t, noise, cfg)
    x_hat_t = forward_mix(x_hat0, pair.y0, t, noise, cfg)
    return x_t, x_hat_t


@torch.no_grad()
def dtm_grad(ctx: DtmContext, x_hat0, pair: SRPair, t, noise, floor_scale: float = 1e-8):
    """omega * (f'(x_hat_t, y0, t) - f'(x_t, y0, t)), Jacobian of the teacher omitted."""
    x_hat0 = x_hat0.detach()
    x_t, x_hat_t = _perturbed_pair(x_hat0, pair, t, noise, ctx.schedule)
    fake = consistency_output(ctx.teacher, x_hat_t, pair.y0, t, ctx.schedule)
    real = consistency_output(ctx.teacher, x_t, pair.y0, t, ctx.schedule)
    per_image = pair.x0[0].numel() if pair.x0.dim() == 4 else pair.x0.numel()
    weight = omega(x_hat0, pair.x0, floor_scale * per_image)
    return _broadcast(weight, x_hat0) * (fake - real)


@torch.no_grad()
def sds_grad(ctx: DtmContext, x_hat0, pair: SRPair, t, noise, floor_scale: float = 1e-8):
    """Ablation: omega * (f'(x_hat_t, y0, t) - x0)."""
    x_hat0 = x_hat0.detach()
    x_hat_t = forward_mix(x_hat0, pair.y0, t, noise, ctx.schedule)
    fake = consistency_output(ctx.teacher, x_hat_t, pair.y0, t, ctx.schedule)
    per_image = pair.x0[0].numel() if pair.x0.dim() == 4 else pair.x0.numel()
    weight = omega(x_hat0, pair.x0, floor_scale * per_image)
    return _broadcast(weight, x_hat0) * (fake - pair.x0)


def dtm_surrogate_loss(x_hat0, grad, w: LossWeights | None = None, mode: str = "perceptual"):
    """0.5 * D(x_hat0, stopgrad(x_hat0 - grad)).

    In ``"l2"`` mode D is the mean squared error, so d loss / d x_hat0 is
    exactly ``grad / x_hat0.numel()``.
    """
    _check_shapes(x_hat0, grad)
    target = (x_hat0 - grad).detach()
    if mode == "l2":
        return 0.5 * ((x_hat0 - target) ** 2).mean()
    if mode == "perceptual":
        return 0.5 * perceptual_proxy(x_hat0, target)
    raise ValueError(f"unknown surrogate mode {mode!r}")

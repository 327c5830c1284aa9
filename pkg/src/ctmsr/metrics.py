"""Full-reference fidelity metrics on [-1, 1] images."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

PSNR_CAP = 99.0
PEAK = 2.0  # value range of [-1, 1] images
# BT.601 luma on [0, 1] RGB, offset 16/255
_Y_WEIGHTS = torch.tensor([65.481, 128.553, 24.966]) / 255.0


def rgb_to_y(img: torch.Tensor) -> torch.Tensor:
    """[-1, 1] RGB -> BT.601 luma in [16/255, 235/255]; keeps a singleton channel axis."""
    rgb01 = (img + 1.0) / 2.0
    w = _Y_WEIGHTS.to(img.dtype).reshape(3, 1, 1)
    return (rgb01 * w).sum(dim=-3, keepdim=True) + 16.0 / 255.0


def psnr(a: torch.Tensor, b: torch.Tensor, y_channel: bool = False) -> float:
    """10 log10(peak^2 / MSE); identical inputs return the 99 dB cap."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = a.double(), b.double()
    peak = PEAK
    if y_channel:
        a, b, peak = rgb_to_y(a), rgb_to_y(b), 1.0
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak**2 / mse), PSNR_CAP)


def _gaussian_window(size=11, sigma=1.5, dtype=torch.float64):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = PEAK) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) and channels."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < 11:
        raise ValueError(f"image too small for an 11x11 SSIM window: {tuple(a.shape[-2:])}")
    x = a.double().reshape(-1, 1, *a.shape[-2:])
    y = b.double().reshape(-1, 1, *b.shape[-2:])
    win = _gaussian_window()[None, None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = F.conv2d(x, win), F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x**2
    syy = F.conv2d(y * y, win) - mu_y**2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())

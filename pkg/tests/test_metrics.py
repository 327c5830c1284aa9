import math

import numpy as np
import pytest
import torch

from ctmsr.metrics import PSNR_CAP, psnr, rgb_to_y, ssim


def test_psnr_cap_and_closed_form():
    a = torch.rand(3, 16, 16, dtype=torch.float64) * 2 - 1
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a + 0.2, a) == pytest.approx(20.0, abs=1e-9)


def test_psnr_oracle():
    gen = np.random.default_rng(4)
    a, b = gen.uniform(-1, 1, (3, 12, 12)), gen.uniform(-1, 1, (3, 12, 12))
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert psnr(torch.from_numpy(a), torch.from_numpy(b)) == pytest.approx(10 * math.log10(4 / mse), abs=1e-9)


def test_psnr_y_channel():
    a = torch.zeros(3, 4, 4)
    y = rgb_to_y(a)
    assert y.shape == (1, 4, 4)
    # mid-grey luma: 16/255 + 0.5 * 219/255
    assert y[0, 0, 0].item() == pytest.approx((16 + 0.5 * (65.481 + 128.553 + 24.966)) / 255, abs=1e-6)
    assert psnr(a, a, y_channel=True) == PSNR_CAP


def test_shape_errors():
    with pytest.raises(ValueError):
        psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
    with pytest.raises(ValueError):
        ssim(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8))


def test_ssim_identity_and_anticorrelation():
    gen = torch.Generator().manual_seed(0)
    a = torch.randn(3, 16, 16, generator=gen, dtype=torch.float64) * 0.3
    a = a - a.mean()
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    # a checkerboard is zero-mean in every window up to the odd-size remainder
    checker = torch.from_numpy((np.indices((16, 16)).sum(0) % 2) - 0.5).expand(3, 16, 16)
    assert ssim(checker, -checker) < 0


def _reference_ssim(a, b, data_range=2.0):
    size, sigma = 11, 1.5
    ax = np.arange(size) - 5
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[0]):
        for i in range(a.shape[1] - size + 1):
            for j in range(a.shape[2] - size + 1):
                x, y = a[ch, i:i + size, j:j + size], b[ch, i:i + size, j:j + size]
                mx, my = (w * x).sum(), (w * y).sum()
                vx = (w * (x - mx) ** 2).sum()
                vy = (w * (y - my) ** 2).sum()
                cov = (w * (x - mx) * (y - my)).sum()
                vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_oracle():
    gen = np.random.default_rng(5)
    a = gen.uniform(-1, 1, (3, 16, 16))
    b = np.clip(a + 0.3 * gen.standard_normal(a.shape), -1, 1)
    assert ssim(torch.from_numpy(a), torch.from_numpy(b)) == pytest.approx(_reference_ssim(a, b), abs=1e-6)

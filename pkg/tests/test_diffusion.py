import pytest
import torch

from conftest import randomize, random_pair
from ctmsr.backbone import init_params
from ctmsr.diffusion import (
    SRPair, adjacent_pair, consistency_output, one_step_sr, sample_forward, terminal_state,
)
from ctmsr.schedules import ScheduleConfig, ScheduleDomainError, noise_level, residual_level, skip_out_scales


def test_sample_forward_boundaries(schedule):
    pair = random_pair()
    noise = torch.randn_like(pair.x0)
    assert torch.equal(sample_forward(pair, 0, noise, schedule).x_t, pair.x0)
    x_T = sample_forward(pair, schedule.total_steps, noise, schedule).x_t
    torch.testing.assert_close(x_T, pair.y0 + schedule.sigma_max * noise, rtol=0, atol=1e-12)


def test_sample_forward_constant_images():
    cfg = ScheduleConfig(total_steps=4, sigma_max=2.0)
    pair = SRPair(torch.zeros(3, 4, 4), torch.full((3, 4, 4), 0.5))
    x_t = sample_forward(pair, 2, torch.zeros(3, 4, 4), cfg).x_t
    assert torch.allclose(x_t, torch.full((3, 4, 4), 0.25))


def test_sample_forward_shape_mismatch(schedule):
    pair = random_pair()
    with pytest.raises(ValueError):
        sample_forward(pair, 1, torch.zeros(1, 3, 8, 8, dtype=torch.float64), schedule)
    with pytest.raises(ValueError):
        SRPair(torch.zeros(3, 4, 4), torch.zeros(3, 4, 8))


def test_sample_forward_per_sample_timesteps(schedule):
    pair = random_pair(n=3)
    noise = torch.randn_like(pair.x0)
    t = torch.tensor([0, 2, 4])
    batched = sample_forward(pair, t, noise, schedule).x_t
    for i in range(3):
        single = sample_forward(pair.subset(i), int(t[i]), noise[i], schedule).x_t
        torch.testing.assert_close(batched[i], single, rtol=0, atol=1e-15)


@pytest.mark.parametrize("t", [1, 2, 4])
def test_forward_moments(t, schedule):
    n = 10_000
    pair = random_pair(seed=3, n=1, size=4)
    gen = torch.Generator().manual_seed(11)
    noise = torch.randn((n,) + pair.x0.shape[1:], generator=gen, dtype=torch.float64)
    x0, y0 = pair.x0.expand(n, -1, -1, -1), pair.y0.expand(n, -1, -1, -1)
    xs = sample_forward(SRPair(x0, y0), t, noise, schedule).x_t
    sigma = noise_level(t, schedule)
    mean_expected = pair.x0[0] + residual_level(t, schedule) * pair.residual[0]
    assert ((xs.mean(0) - mean_expected).abs() <= 4 * sigma / n**0.5).all()
    rel = (xs.var(0) / sigma**2 - 1).abs()
    assert (rel <= 0.05).all()


def test_adjacent_pair_shares_noise(schedule):
    pair = random_pair()
    noise = torch.randn_like(pair.x0)
    prev, cur = adjacent_pair(pair, 3, noise, schedule)
    assert prev.noise is cur.noise
    d_alpha = residual_level(3, schedule) - residual_level(2, schedule)
    d_sigma = noise_level(3, schedule) - noise_level(2, schedule)
    torch.testing.assert_close(cur.x_t - prev.x_t, d_alpha * pair.residual + d_sigma * noise, rtol=0, atol=1e-14)


def test_adjacent_pair_first_step_is_x0(schedule):
    pair = random_pair()
    prev, _ = adjacent_pair(pair, 1, torch.randn_like(pair.x0), schedule)
    assert torch.equal(prev.x_t, pair.x0)


def test_adjacent_pair_terminal_zero_noise(schedule):
    pair = random_pair()
    T = schedule.total_steps
    prev, cur = adjacent_pair(pair, T, torch.zeros_like(pair.x0), schedule)
    d_alpha = 1.0 - (T - 1) / T  # linear schedule
    torch.testing.assert_close(cur.x_t - prev.x_t, d_alpha * pair.residual, rtol=0, atol=1e-14)


def test_adjacent_pair_independent_noise(schedule):
    pair = random_pair()
    noise, other = torch.randn_like(pair.x0), torch.randn_like(pair.x0)
    prev, cur = adjacent_pair(pair, 2, noise, schedule, prev_noise=other)
    torch.testing.assert_close(prev.x_t, sample_forward(pair, 1, other, schedule).x_t)
    torch.testing.assert_close(cur.x_t, sample_forward(pair, 2, noise, schedule).x_t)


def test_adjacent_pair_rejects_t0(schedule):
    pair = random_pair()
    with pytest.raises(ScheduleDomainError):
        adjacent_pair(pair, 0, torch.zeros_like(pair.x0), schedule)


def test_boundary_identity_random_backbones(tiny_spec, schedule):
    gen = torch.Generator().manual_seed(0)
    for seed in range(100):
        model = randomize(init_params(tiny_spec, seed, schedule, torch.float64), seed, scale=0.5)
        x = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 3
        y = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
        assert torch.equal(consistency_output(model, x, y, 0), x)


def test_consistency_output_zero_backbone(tiny_spec, schedule):
    model = init_params(tiny_spec, 0, schedule, torch.float64)
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    for t in range(schedule.total_steps + 1):
        c_skip, _ = skip_out_scales(t, schedule)
        torch.testing.assert_close(consistency_output(model, x, x, t), c_skip * x, rtol=0, atol=0)


def test_consistency_output_terminal_value(tiny_spec, schedule):
    model = init_params(tiny_spec, 0, schedule, torch.float64)
    torch.nn.init.zeros_(model.backbone.out_conv.weight)
    torch.nn.init.constant_(model.backbone.out_conv.bias, 1.0)  # F == 1 everywhere after pixel shuffle
    x = torch.ones(1, 3, 8, 8, dtype=torch.float64)
    out = consistency_output(model, x, x, schedule.total_steps)
    # 0.25/4.25 + 1/sqrt(4.25)
    torch.testing.assert_close(out, torch.full_like(x, 0.5438947794844306), rtol=0, atol=1e-13)


def test_one_step_sr_contract(random_model, schedule):
    y0 = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    noise = torch.randn_like(y0)
    before = random_model.backbone_calls
    out = one_step_sr(random_model, y0, noise)
    assert random_model.backbone_calls - before == 2
    assert out.shape == y0.shape and torch.isfinite(out).all()
    assert torch.equal(out, one_step_sr(random_model, y0, noise))
    x_T = terminal_state(y0, noise, schedule)
    torch.testing.assert_close(out, consistency_output(random_model, x_T, y0, schedule.total_steps))

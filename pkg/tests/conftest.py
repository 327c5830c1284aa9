import pytest
import torch

from ctmsr.backbone import BackboneSpec, init_params
from ctmsr.diffusion import SRPair
from ctmsr.schedules import ScheduleConfig

TINY = BackboneSpec(base_channels=8, depth=1, time_embed_dim=8, channel_mult=(1, 1))


@pytest.fixture
def tiny_spec():
    return TINY


@pytest.fixture
def schedule():
    return ScheduleConfig(total_steps=4, sigma_max=2.0, sigma_data=0.5)


def randomize(model, seed=0, scale=0.2):
    """Give every parameter (including the zero-initialised output conv) random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


@pytest.fixture
def random_model(tiny_spec, schedule):
    return randomize(init_params(tiny_spec, 0, schedule, torch.float64))


def random_pair(seed=0, n=2, size=8, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.rand(n, 3, size, size, generator=gen, dtype=dtype) * 2 - 1
    y0 = torch.rand(n, 3, size, size, generator=gen, dtype=dtype) * 2 - 1
    return SRPair(x0, y0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

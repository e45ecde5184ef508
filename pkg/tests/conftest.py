import pytest
import torch
import torch.nn as nn

from stegodiff.diffusion_math import make_linear_schedule
from stegodiff.score_net import UNetConfig, build_net
from stegodiff.stego_keys import SecretKey, SecretPayload

torch.set_num_threads(1)

TINY = UNetConfig(image_size=8, in_channels=3, base_channels=8, channel_mults=(1, 2), temb_dim=16, groups=4)


class TinyScoreNet(nn.Module):
    """~100-parameter timestep-conditioned noise predictor for gradient checks."""

    def __init__(self, channels: int = 1, hidden: int = 4):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.temb = nn.Linear(2, hidden)
        self.conv2 = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x, t):
        tf = t.to(x.dtype)[:, None] / 100.0
        emb = self.temb(torch.cat([torch.sin(tf), torch.cos(tf)], dim=1))
        h = torch.tanh(self.conv1(x) + emb[:, :, None, None])
        return self.conv2(h)


@pytest.fixture
def tiny_net():
    return build_net(TINY, seed=0)


@pytest.fixture
def sched100():
    return make_linear_schedule(100, 1e-4, 0.02)


@pytest.fixture
def sched1000():
    return make_linear_schedule(1000, 1e-4, 0.02)


def randomize_(net: nn.Module, seed: int = 0, std: float = 0.05) -> nn.Module:
    """Give every parameter (including zero-initialized output layers) non-trivial values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return net


def make_payload(shape=(3, 8, 8), seed: int = 11, timestep: int = 50, img_seed: int = 0, label="p"):
    g = torch.Generator().manual_seed(img_seed)
    img = torch.rand(shape, generator=g) * 2 - 1
    return SecretPayload(img, SecretKey(seed, timestep), label)


@pytest.fixture(scope="session")
def trained_tiny():
    """TINY net trained briefly on 8x8 toy shapes (T=100); returns (net, schedule)."""
    from stegodiff.images import toy_shapes_dataset
    from stegodiff.score_net import train_toy_ddpm

    sched = make_linear_schedule(100, 1e-4, 0.02)
    net, _ = train_toy_ddpm(toy_shapes_dataset(512, 8, seed=0), sched, 1500, config=TINY, batch_size=32,
                            lr=2e-3, seed=0, log_every=500)
    net.eval()
    return net, sched


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

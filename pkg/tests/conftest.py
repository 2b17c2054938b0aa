import pytest
import torch

from sgad.config import NetworkConfig
from sgad.model import SGADModel

torch.set_num_threads(1)


@pytest.fixture
def toy_cfg():
    """3 blocks in one C-block; only the last block is forced."""
    return NetworkConfig(widths=(4,), blocks_per_stage=3, in_channels=3, image_size=8,
                         num_classes=5, bmnet_channels=4, sgnet_widths=(4, 4, 8, 8))


@pytest.fixture
def small_cfg():
    """Two C-blocks of 3 blocks: forced blocks are 3 (shape change) and 5 (last)."""
    return NetworkConfig(widths=(4, 8), blocks_per_stage=3, in_channels=3, image_size=8,
                         num_classes=5, bmnet_channels=4, sgnet_widths=(4, 4, 8, 8))


@pytest.fixture
def small_model(small_cfg):
    return SGADModel.build(small_cfg)


def randomize_bn(module, seed=0):
    """Give BN layers non-trivial running statistics and affine parameters."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            with torch.no_grad():
                m.running_mean.copy_(torch.randn(m.num_features, generator=g) * 0.1)
                m.running_var.copy_(torch.rand(m.num_features, generator=g) + 0.5)
                m.weight.copy_(torch.rand(m.num_features, generator=g) + 0.5)
                m.bias.copy_(torch.randn(m.num_features, generator=g) * 0.1)


# filled by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

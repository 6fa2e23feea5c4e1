import numpy as np
import pytest

from tcan.config import ModelConfig
from tcan.data import SyntheticConfig, collate, generate_synthetic
from tcan.model import TCAN


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    """A handful of short samples with small feature widths."""
    cfg = SyntheticConfig(n_samples=12, seed=3, d_t=5, d_v=4, d_a=3, len_t=(4, 8),
                          len_v=(5, 10), len_a=(6, 12), signal_scale=1.0)
    return generate_synthetic(cfg)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d=8, L=6, N=1, h=2)


@pytest.fixture
def tiny_model(tiny_cfg, tiny_data):
    return TCAN(tiny_cfg, tiny_data.dims, seed=0)


@pytest.fixture
def tiny_batch(tiny_data):
    return collate(tiny_data.train[:4])


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

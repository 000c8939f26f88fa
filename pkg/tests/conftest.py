import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from coresleep.config import ModelConfig

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    """Small geometry so gradient checks and exhaustive sweeps stay fast."""
    return ModelConfig.reduced(n_frames=5, n_features=6, max_windows=3, dropout=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l[1:3])):
            terminalreporter.write_line(line)

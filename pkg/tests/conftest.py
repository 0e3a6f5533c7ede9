import numpy as np
import pytest

from softtraj.model import ModelConfig, init_params
from softtraj.riskgrid import ClarkeGrid, builtin_grid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def clarke():
    return ClarkeGrid()


@pytest.fixture(scope="session")
def hypo_grid():
    return builtin_grid("hypo-miss")


@pytest.fixture
def tiny_params():
    cfg = ModelConfig(V=16, d=16, n_layers=2, n_heads=2, max_len=48)
    return init_params(cfg, seed=3, dtype=np.float64)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

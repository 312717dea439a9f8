import numpy as np
import pytest

from cascadelab.model import GridSpec, default_config, initial_data, load_preset


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def small_cfg():
    """Coarse copy of the default config for fast property tests."""
    return load_preset("default").with_grid(GridSpec.aligned(24, 20, 0.4, 1.0))


@pytest.fixture(scope="session")
def bump_data(cfg):
    return initial_data("gaussian-bump", cfg.grid)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from mbcpp.scenario import default_band, sample_default_scenario

GHZ = 1e9


@pytest.fixture
def dual_band():
    """Six BSs from geometry seed 1 on 3.5 + 12 GHz at default power."""
    return sample_default_scenario(1, 6, (3.5 * GHZ, 12 * GHZ))


@pytest.fixture
def single_band():
    return sample_default_scenario(1, 6, (3.5 * GHZ,))


@pytest.fixture
def clocked_dual_band(dual_band):
    return dual_band.replace(bs_clock_std_s=30e-12)


def random_scenario(rng, num_bands=None, num_bs=None):
    """Random deployment with carriers drawn from the default FR1/FR3/FR2 set."""
    K = int(rng.integers(1, 4)) if num_bands is None else num_bands
    M = int(rng.integers(4, 9)) if num_bs is None else num_bs
    fcs = rng.choice([3.5, 12.0, 28.0], size=K, replace=False) * GHZ
    seed = int(rng.integers(2**31))
    return sample_default_scenario(seed, M, tuple(fcs), bands=tuple(default_band(f) for f in fcs))


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

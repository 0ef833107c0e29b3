import numpy as np
import pytest

from pshurdle.grid import build_grid
from pshurdle.simulate import ScenarioConfig, make_scenario


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running simulation checks")


@pytest.fixture(scope="session")
def small_grid():
    return build_grid(15, 15)


@pytest.fixture(scope="session")
def small_scenario(small_grid):
    """Scenario-3 replica on a 15 x 15 grid with three vessels among the FDD rows."""
    cfg = ScenarioConfig.preset(3, n_s=40, n_c=40, seed=11)
    truth, data = make_scenario(cfg, small_grid)
    vid = np.where(data.is_fdd, 1 + np.arange(len(data)) % 3, 0)
    data = type(data)(data.locations, data.z, data.y, data.is_fdd, vid)
    return cfg, truth, data


def central_gradient(f, x, idx, h=1e-5):
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        out[j] = (f(xp) - f(xm)) / (2 * h)
    return out


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[", 1)[1].split("]", 1)[0])):
            terminalreporter.write_line(line)

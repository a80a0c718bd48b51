import numpy as np
import pytest

from cocycle_lab import FourierMap


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_map(rng, d=1, m=2, radius=3, scale=1.0, decay=1.0):
    """Random trigonometric matrix polynomial with geometrically decaying modes."""
    shape = (2 * radius + 1,) * d + (m, m)
    c = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    grids = np.meshgrid(*[np.arange(-radius, radius + 1)] * d, indexing="ij")
    l1 = sum(np.abs(g) for g in grids)
    c *= np.exp(-decay * l1)[(...,) + (None, None)]
    return FourierMap(scale * c)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

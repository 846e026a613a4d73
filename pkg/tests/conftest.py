import numpy as np
import pytest

from distrl.measures import CategoricalMeasure, ReturnGrid, from_cdf


def uniform02(K: int = 1000) -> CategoricalMeasure:
    """Grid discretization of Uniform[0, 2] at gamma = 1/2."""
    grid = ReturnGrid.from_k(K, 0.5)
    return from_cdf(grid, lambda x: np.clip(x / 2.0, 0.0, 1.0))


def two_point(grid: ReturnGrid, q: float) -> CategoricalMeasure:
    """``(1 - q) delta_0 + q delta_{x_K}``."""
    w = np.zeros(grid.num_atoms)
    w[0], w[-1] = 1.0 - q, q
    return CategoricalMeasure(grid, w)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def u02():
    return uniform02()


# Lines appended by the acceptance suite, echoed in the terminal summary so
# they show up even when output capture is on.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

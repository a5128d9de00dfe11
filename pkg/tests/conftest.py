import numpy as np
import pytest

from scalemra.grid import SpatialGrid

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str):
    line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grid():
    return SpatialGrid()


@pytest.fixture(scope="session")
def fgrid(grid):
    return grid.frequency_grid()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

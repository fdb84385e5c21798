import numpy as np
import pytest

from hiertag.hierarchy import Hierarchy

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_h():
    # groups {0,1,2}, {3}
    return Hierarchy.from_groups({"a": ["x", "y", "z"], "b": ["w"]})


@pytest.fixture
def check_h():
    # N_fine=6, N_coarse=2
    return Hierarchy.from_groups({"a": ["a1", "a2", "a3", "a4"], "b": ["b1", "b2"]})


@pytest.fixture
def desk_h():
    return Hierarchy.from_groups({f"c{c}": [f"t{c}_{i}" for i in range(3)] for c in range(4)})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rafsel.generator import generate_poisson2d  # noqa: E402
from rafsel.sparse import CsrMatrix  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture
def fig1_matrix():
    return CsrMatrix.from_dense([[10, 1, 0, 0], [1, 10, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])


@pytest.fixture
def poisson31():
    return generate_poisson2d(31, 31)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

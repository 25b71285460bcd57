import warnings
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import settings

from fraclab.operator import build_operator
from fraclab.spectral import compute_basis

settings.register_profile("fraclab", deadline=None, max_examples=30, derandomize=True)
settings.load_profile("fraclab")


@lru_cache(maxsize=None)
def operator(s, n, left=0.0, right=1.0):
    return build_operator(s, n, left, right)


@lru_cache(maxsize=None)
def basis(s, n, M, left=0.0, right=1.0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return compute_basis(operator(s, n, left, right), M)


@pytest.fixture(scope="session")
def basis75():
    """s = 0.75 on (0, 1), n = 1024, 64 modes."""
    return basis(0.75, 1024, 64)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import time

import numpy as np
import pytest

from higgsq.grids import clvq_build, lloyd_max_1d
from higgsq.harness import QuadraticModel, TinyConfig, train_tiny

# Lines recorded by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []
FIXTURE_SECONDS: dict[str, float] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def _timed(name, fn):
    t0 = time.perf_counter()
    out = fn()
    FIXTURE_SECONDS[name] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def clvq_2_256():
    return _timed("clvq_2_256", lambda: clvq_build(2, 256, seed=0))


@pytest.fixture(scope="session")
def lm_grids():
    return {n: lloyd_max_1d(n) for n in (1, 2, 4, 8, 16, 32, 64, 256)}


@pytest.fixture(scope="session")
def tiny_model():
    return _timed("tiny_model", lambda: train_tiny(TinyConfig(), seed=0))


@pytest.fixture(scope="session")
def quad_model():
    return QuadraticModel.random([0.5, 1.0, 2.0, 4.0], [1024, 2048, 4096, 8192], seed=0, base=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

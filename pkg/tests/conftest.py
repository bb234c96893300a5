import numpy as np
import pytest

from ratiomatch.samplers import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def random_bits(rng, n, d):
    return rng.integers(0, 2, size=(n, d)).astype(np.float64)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

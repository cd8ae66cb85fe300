import numpy as np
import pytest

from cfglab.diffusion import linear_schedule
from cfglab.evaldata import default_mixture


@pytest.fixture(scope="session")
def schedule():
    return linear_schedule(100, 1e-3, 0.2)


@pytest.fixture(scope="session")
def mixture():
    return default_mixture()


def rel_err(a, b, floor=1e-3):
    """Entrywise relative error with a magnitude floor for near-zero entries."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# Acceptance criteria append (number, passed, detail) here; printed at session end.
ACCEPTANCE_RESULTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")

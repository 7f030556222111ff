import numpy as np
import pytest
from hypothesis import settings

from worldmodel.cmp import Cmp, random_cmp

# fixed example streams so every run sees the same cases
settings.register_profile("repro", derandomize=True, deadline=None, print_blob=True)
settings.load_profile("repro")


@pytest.fixture(scope="session")
def small_env():
    return random_cmp(5, 2, 2, 3)


@pytest.fixture(scope="session")
def deterministic_rows_env():
    """Communicating 4-state process mixing deterministic and stochastic rows."""
    P = np.zeros((4, 3, 4))
    P[0, 0, 1] = 1.0
    P[0, 1] = [0.0, 0.5, 0.5, 0.0]
    P[0, 2, 0] = 1.0
    P[1, 0, 2] = 1.0
    P[1, 1] = [0.3, 0.0, 0.0, 0.7]
    P[1, 2, 1] = 1.0
    P[2, 0, 3] = 1.0
    P[2, 1] = [0.25, 0.25, 0.25, 0.25]
    P[2, 2, 2] = 1.0
    P[3, 0, 0] = 1.0
    P[3, 1] = [0.0, 0.0, 0.9, 0.1]
    P[3, 2, 3] = 1.0
    return Cmp(P)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(RESULTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_difference(fn, arr, idx, h=1e-5):
    """Central difference of scalar ``fn()`` w.r.t. ``arr[idx]`` (in place)."""
    old = arr[idx]
    arr[idx] = old + h
    up = fn()
    arr[idx] = old - h
    down = fn()
    arr[idx] = old
    return (up - down) / (2.0 * h)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(floor, abs(a), abs(b))


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


def random_walk(rng, n, step=50.0):
    return np.cumsum(rng.normal(0.0, step, size=(n, 2)), axis=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_tables():
    """Random structural/visual tables over 12 cells plus a zero UNK row."""
    r = np.random.default_rng(7)
    s = r.normal(size=(13, 64)) / 8
    v = r.normal(size=(13, 64)) / 8
    s[-1] = 0
    v[-1] = 0
    return s, v


@pytest.fixture(scope="session")
def small_items():
    r = np.random.default_rng(3)
    items = []
    for _ in range(6):
        n1, n2 = int(r.integers(1, 7)), int(r.integers(2, 9))
        items.append((r.integers(0, 12, size=n1), r.random((n2, 6))))
    return items


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rawgrl.actorcritic import init_all
from rawgrl.netmodel import ScenarioConfig

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("default")


@pytest.fixture
def small_cfg():
    return ScenarioConfig(num_users=5, num_groups=2)


@pytest.fixture
def store4():
    """Freshly initialized parameters for a 4-AP scenario."""
    return init_all(4, 0)


def random_states(A, K, rng):
    """Plausible normalized state matrix: each column has one measurable AP at least."""
    rng = np.random.default_rng(rng)
    S = rng.uniform(-0.3, 1.0, size=(A, K))
    S[rng.integers(0, A, size=K), np.arange(K)] = rng.uniform(-0.5, -0.05, size=K)
    return S


ACCEPTANCE_LINES = []


def report_criterion(n, passed, detail):
    """Record and print one verdict line for an acceptance criterion."""
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

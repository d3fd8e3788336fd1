import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA_KEY] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line for the summary."""
    lines = request.config.stash[_CRITERIA_KEY]

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
        lines.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """Record one criterion outcome; the summary is printed at the end of the run."""
    store = request.config.stash[_ACCEPTANCE]

    def record(number, title, ok, detail):
        store[number] = (bool(ok), title, detail)
        assert ok, f"criterion {number} ({title}): {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        ok, title, detail = store[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {title}: {detail}")

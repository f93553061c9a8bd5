import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def f64():
    """Run a test with float64 as the default dtype."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one criterion outcome; the line is printed now and again in the run summary."""

    def record(name: str, ok: bool, detail: str, elapsed: float, limit: float) -> None:
        passed = bool(ok) and elapsed <= limit
        line = (f"[{'PASS' if passed else 'FAIL'}] {name}: {detail} "
                f"({elapsed:.1f}s, limit {limit:g}s)")
        print(line)
        request.config.stash[_ACCEPTANCE].append(line)
        assert ok, line
        assert elapsed <= limit, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

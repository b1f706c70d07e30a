import numpy as np
import pytest

from wmdetect import WatermarkConfig, load_fixture
from wmdetect.policy import solve_policy

SIGMA2 = 1.19


@pytest.fixture(scope="session")
def system_a():
    return load_fixture("system-a")


@pytest.fixture(scope="session")
def system_b():
    return load_fixture("system-b")


@pytest.fixture(scope="session")
def wm_a(system_a):
    return WatermarkConfig.diagonal(system_a[0].p, SIGMA2)


@pytest.fixture(scope="session")
def operating_policy(system_a, wm_a):
    """Two-threshold policy at lambda_e = 0.2, lambda_f = 100, seed 0."""
    model, attack = system_a
    return solve_policy(model, attack, wm_a, 0.2, 100.0, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one acceptance criterion; the verdict is echoed at once and in the run summary."""

    def _report(number: int, title: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" | {detail}" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])

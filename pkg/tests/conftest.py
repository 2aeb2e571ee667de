import time

import numpy as np
import pytest

from fgsh.model import make_spin_boson

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record and print one pass/fail line for an acceptance criterion."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number, title, passed, detail):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        request.config.stash[_ACCEPTANCE].append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line)
        return passed

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def spin_boson():
    """``omega = c = 1`` spin-boson model in one dimension."""
    return make_spin_boson(1.0, 1.0, 0.1, 0.1)


@pytest.fixture(scope="session")
def identity_suite():
    """``(results, seconds)`` of the ``fgsh verify`` suite at seed 0, computed once per session."""
    from fgsh.checks import run_all
    start = time.perf_counter()
    results = run_all(seed=0)
    return results, time.perf_counter() - start

import numpy as np
import pytest

from iclmpc import qp
from iclmpc.harness import load_scenario


@pytest.fixture(scope="session")
def scenario():
    return load_scenario("sec5")


@pytest.fixture(scope="session")
def task(scenario):
    return scenario.task


@pytest.fixture(params=sorted(qp.BACKENDS))
def backend(request):
    return request.param


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print a one-line PASS/FAIL verdict for an acceptance criterion."""
    store = request.config.stash.setdefault(_VERDICTS, [])

    def emit(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        store.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import time

import pytest

from exitdvfs.scenario import toy_model

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def trained20_timed():
    """Toy early-exit network at T=20, trained once per session (~45 s), with its training time."""
    t0 = time.perf_counter()
    model, _ = toy_model(20)
    return model, time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained20(trained20_timed):
    return trained20_timed[0]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

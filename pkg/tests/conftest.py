import logging

import pytest

from cmplan.scenario import load_scenario, run_pipeline

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict():
    """Record and print one pass/fail line per acceptance criterion, then assert."""
    def report(number: int, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return report


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR)


@pytest.fixture(scope="session")
def dbserver():
    return run_pipeline(load_scenario("dbserver"))


@pytest.fixture(scope="session")
def enterprise_internal():
    return run_pipeline(load_scenario("enterprise", "internal"))


@pytest.fixture(scope="session")
def enterprise_external():
    return run_pipeline(load_scenario("enterprise", "external"))


@pytest.fixture(scope="session")
def cyclic():
    return run_pipeline(load_scenario("cyclic"))


def by_name(model, *names):
    """DeployedCMs of a model picked by their display name."""
    table = {d.name: d for d in model.variables}
    return tuple(sorted(table[n] for n in names))

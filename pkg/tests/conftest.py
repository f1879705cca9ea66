"""Shared pytest plumbing: the acceptance-criteria summary block.

Each acceptance test registers a one-line result through the ``criterion``
fixture; failures are caught from the test report itself so the block always
reflects what actually ran.
"""

import re

_results = {}


def pytest_configure(config):
    _results.clear()


import pytest


@pytest.fixture
def criterion():
    """Recorder: call with (number, detail) as the test's last statement."""
    def record(n: int, detail: str = ""):
        _results[int(n)] = ("PASS", detail)
    return record


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" and report.failed:
        _results[n] = ("FAIL", report.nodeid.split("::")[-1])
    elif report.when == "setup" and report.failed:
        _results[n] = ("FAIL", "setup error (shared training fixture)")
    elif report.when == "call" and report.passed and n not in _results:
        _results[n] = ("PASS", "")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        outcome, detail = _results[n]
        line = f"criterion {n:>2}: {outcome}"
        if detail:
            line += f"  {detail}"
        terminalreporter.write_line(line)

"""Shared fixtures and the acceptance-summary reporter.

Acceptance tests register a label via the `criterion` marker; the terminal
summary prints one PASS/FAIL line per criterion after the run.
"""

import numpy as np
import pytest

_acceptance_results: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(label): acceptance criterion label for the summary table"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call":
        _acceptance_results[marker.args[0]] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for label in sorted(_acceptance_results):
        outcome = _acceptance_results[label]
        word = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"{label}: {word}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)

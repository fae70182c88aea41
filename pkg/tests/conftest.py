"""Shared pytest hooks: a one-line verdict per acceptance criterion.

Tests marked ``@pytest.mark.criterion(name)`` count towards that criterion;
it passes only if every such test passes.  ``criterion.note`` attaches
measured values to the summary line.
"""

import pytest

_OUTCOMES: dict[str, list[bool]] = {}
_NOTES: dict[str, list[str]] = {}


class Criterion:
    def note(self, name: str, detail: str) -> None:
        _NOTES.setdefault(name, []).append(detail)


@pytest.fixture(scope="session")
def criterion():
    return Criterion()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test counts towards the named acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES.setdefault(name, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _OUTCOMES.items():
        verdict = "PASS" if all(outcomes) else "FAIL"
        notes = "; ".join(_NOTES.get(name, []))
        terminalreporter.write_line(f"{verdict}  {name} ({sum(outcomes)}/{len(outcomes)} checks)  {notes}")

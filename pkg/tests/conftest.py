"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""

from collections import defaultdict

import pytest

_OUTCOMES: dict[int, list[bool]] = defaultdict(list)
_TITLES: dict[int, str] = {}
_DETAILS: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    _TITLES[n] = title
    # setup errors (e.g. a failed training fixture) count against the criterion too
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _OUTCOMES[n].append(call.excinfo is None)
        # measured values recorded with the record_property("detail", ...) fixture
        _DETAILS[n] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        verdict = "PASS" if all(_OUTCOMES[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {_TITLES[n]}")
        for line in _DETAILS[n]:
            terminalreporter.write_line(f"    {line}")

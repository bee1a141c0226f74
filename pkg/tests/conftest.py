"""Shared pytest config: prints one pass/fail line per acceptance criterion."""

from __future__ import annotations

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_?(\w*)")
_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    number = int(m.group(1))
    label = m.group(2).replace("_", " ")
    _results[number] = (label, report.outcome.upper())


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_results):
        label, outcome = _results[number]
        status = "PASS" if outcome == "PASSED" else outcome
        terminalreporter.write_line(f"criterion {number:2d} [{status}] {label}")

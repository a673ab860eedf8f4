"""Acceptance reporting: one PASS/FAIL line per numbered criterion.

Tests in ``test_acceptance.py`` carry ``@pytest.mark.criterion(n, title)``.
A criterion passes when every test carrying its number passed. Tests may
attach a short measurement via ``record_property("detail", ...)``.
"""

from __future__ import annotations

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "seen": False, "details": []})
    if report.when == "call" or report.failed or report.skipped:
        if report.when == "call":
            entry["seen"] = True
        if report.failed or report.skipped:
            entry["ok"] = False
        if report.when == "call":
            entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        line = f"criterion {number}: {status}  {entry['title']}"
        if entry["details"]:
            line += "  [" + "; ".join(entry["details"]) + "]"
        tr.write_line(line)

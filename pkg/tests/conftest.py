"""Shared fixtures and the per-criterion summary for the acceptance suite."""

from __future__ import annotations

import pytest

_criteria: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        number = marker.args[0]
        detail = dict(item.user_properties).get("detail", "")
        if call.excinfo is None:
            outcome = "PASS"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            outcome = "SKIP"
        else:
            outcome = "FAIL"
            if not detail:
                detail = call.excinfo.exconly().splitlines()[0][:200]
        _criteria.setdefault(number, []).append((outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        parts = _criteria[number]
        outcomes = {o for o, _ in parts}
        outcome = "FAIL" if "FAIL" in outcomes else "SKIP" if outcomes == {"SKIP"} else "PASS"
        detail = "; ".join(d for _, d in parts if d)
        terminalreporter.write_line(f"{outcome} criterion {number}: {detail}")

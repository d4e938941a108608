"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import pytest

_results = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when == "teardown":
        return
    number, title = marker.args
    if call.excinfo is not None:
        status = "SKIP" if call.excinfo.errisinstance(pytest.skip.Exception) else "FAIL"
        lines = str(call.excinfo.value).strip().splitlines()
        _results[number] = (title, status, lines[0] if lines else call.excinfo.typename)
    elif call.when == "call":
        _results[number] = (title, "PASS", "; ".join(f"{k}={v}" for k, v in item.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status, detail = _results[number]
        terminalreporter.write_line(f"criterion {number} {status}: {title}" + (f" ({detail})" if detail else ""))

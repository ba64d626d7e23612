"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

_CRITERIA: dict[int, tuple[str, str]] = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    n, name = int(m.group(1)), m.group(2).replace("_", " ")
    if report.when == "call" or report.outcome != "passed":
        prev = _CRITERIA.get(n, (name, "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and prev == "PASS" else report.outcome.upper()
        if status == "FAILED":
            status = "FAIL"
        _CRITERIA[n] = (name, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} ({name}): {status}")

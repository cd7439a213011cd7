"""Shared pytest config: per-criterion summary lines for the acceptance run."""

import re

_ACCEPTANCE_RESULTS = {}

_CRITERION_RE = re.compile(r"test_criterion_(\d+)\w*")


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    match = _CRITERION_RE.search(report.nodeid)
    if not match:
        return
    num = int(match.group(1))
    label = report.nodeid.split("::")[-1]
    passed = report.passed and _ACCEPTANCE_RESULTS.get((num, label), True)
    _ACCEPTANCE_RESULTS[(num, label)] = passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for (num, label), passed in sorted(_ACCEPTANCE_RESULTS.items()):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} {status}  ({label})")

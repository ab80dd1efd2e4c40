"""Shared pytest config.

Collects the outcome of every test in test_acceptance.py and prints one
PASS/FAIL line per criterion at the end of the run, so the acceptance
status is readable without scanning the full log.
"""

import collections

_ACCEPTANCE_FILE = "test_acceptance.py"
_acceptance_titles = {}
_acceptance_outcomes = collections.OrderedDict()


def pytest_collection_modifyitems(items):
    for item in items:
        if _ACCEPTANCE_FILE not in item.nodeid:
            continue
        doc = (item.function.__doc__ or "").strip().splitlines()
        _acceptance_titles[item.nodeid] = doc[0] if doc else item.name
        _acceptance_outcomes[item.nodeid] = "NOT RUN"


def pytest_runtest_logreport(report):
    if _ACCEPTANCE_FILE not in report.nodeid:
        return
    if report.when == "call":
        _acceptance_outcomes[report.nodeid] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and (report.failed or report.skipped):
        _acceptance_outcomes[report.nodeid] = "FAIL" if report.failed else "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in _acceptance_outcomes.items():
        title = _acceptance_titles.get(nodeid, nodeid)
        terminalreporter.write_line(f"[{outcome}] {title}")

"""Prints one pass/fail line per acceptance criterion at the end of the run."""

import re

_criteria = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_(A\d+)", report.nodeid)
    if not m:
        return
    cid = m.group(1)
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(report.user_properties).get("summary", "")
        _criteria[cid] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: int(c[1:])):
        status, detail = _criteria[cid]
        terminalreporter.write_line(f"{cid} {status}  {detail}".rstrip())

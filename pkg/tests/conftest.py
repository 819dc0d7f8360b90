"""Shared pytest plumbing: the acceptance-criteria summary table.

Tests in test_acceptance.py are named test_a<N>_*; each records a short
measurement string via record_property("acceptance", ...). After the run,
one PASS/FAIL line per criterion is printed so the release gate can be
read off the bottom of the log.
"""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_(a\d+)")

_outcomes: dict[str, bool] = {}
_details: dict[str, str] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    crit = m.group(1).upper()
    if report.when == "call":
        _outcomes[crit] = _outcomes.get(crit, True) and report.passed
        for name, value in report.user_properties:
            if name == "acceptance":
                _details[crit] = str(value)
    elif report.when == "setup" and (report.failed or report.skipped):
        # a broken or skipped fixture means the criterion was not demonstrated
        _outcomes[crit] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_outcomes):
        verdict = "PASS" if _outcomes[crit] else "FAIL"
        detail = _details.get(crit)
        line = f"{crit} {verdict}" + (f"  {detail}" if detail else "")
        terminalreporter.write_line(line)

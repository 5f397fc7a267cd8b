"""Collects the acceptance verdicts and prints one PASS/FAIL line per criterion."""
import re

_VERDICTS = {}
NOTES = []


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed:
        failed = report.failed or _VERDICTS.get(n) == "FAIL"
        _VERDICTS[n] = "FAIL" if failed else ("SKIP" if report.skipped else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for note in NOTES:
        tr.write_line(note)
    for n in sorted(_VERDICTS):
        tr.write_line(f"criterion {n}: {_VERDICTS[n]}")

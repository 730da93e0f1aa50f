import re

_CRITERIA = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\w+?)_")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    key = m.group(1)
    if report.when == "call" or report.outcome != "passed":
        ok = _CRITERIA.get(key, True) and report.outcome == "passed"
        _CRITERIA[key] = ok


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (len(k), k)):
        terminalreporter.write_line(f"criterion {key}: {'PASS' if _CRITERIA[key] else 'FAIL'}")

import pytest

_RESULTS: dict[str, str] = {}
_DETAILS: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = "test_acceptance.py::"
    if marker not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if name.startswith("test_c") and "_" in name:
        _RESULTS[name] = "PASS" if report.outcome == "passed" else report.outcome.upper()
        # measured numbers from the test's own report line
        for line in report.capstdout.splitlines():
            if line.startswith("[C"):
                _DETAILS[name] = line.split(" ", 2)[-1]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS, key=lambda n: int(n[6:].split("_")[0])):
        terminalreporter.write_line(f"{_RESULTS[name]:<6} {name}")
        if name in _DETAILS:
            terminalreporter.write_line(f"       {_DETAILS[name]}")

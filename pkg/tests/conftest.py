"""Shared pytest wiring: a pass/fail summary line per acceptance criterion."""

_acceptance = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _acceptance[report.nodeid] = report.outcome
    elif report.when == "setup" and report.failed and "test_acceptance" in report.nodeid:
        _acceptance[report.nodeid] = "error"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for nodeid in sorted(_acceptance):
        outcome = _acceptance[nodeid]
        tag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{tag}] {nodeid.split('::')[-1]}")

import re

import pytest

# criterion number -> verdict line, filled by tests/test_acceptance.py
VERDICTS: dict[int, str] = {}
_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line, then fail the test if needed."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(n: int, ok: bool, detail: str):
        line = f"acceptance criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        VERDICTS[n] = line
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, line

    return record


def pytest_runtest_logreport(report):
    # an acceptance test that errors before recording still gets a FAIL line
    m = _CRITERION.search(report.nodeid)
    if m and report.failed and int(m.group(1)) not in VERDICTS:
        lines = [ln for ln in report.longreprtext.splitlines() if ln.strip()]
        cause = lines[-1] if lines else "unknown error"
        VERDICTS[int(m.group(1))] = (f"acceptance criterion {m.group(1)}: FAIL - "
                                     f"error in {report.when}: {cause}")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])

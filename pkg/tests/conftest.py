"""Acceptance reporting.

Tests marked ``@pytest.mark.acceptance(number, title, tolerance, budget=seconds)``
get one summary line each at the end of the run. A test that passes its
assertions but overruns its time budget is reported as failed.
"""

import pytest

_results: dict[str, tuple] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title, tolerance, budget): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title, tolerance = marker.args
    budget = marker.kwargs.get("budget")
    if report.passed and budget is not None and call.duration > budget:
        report.outcome = "failed"
        report.longrepr = f"runtime {call.duration:.1f} s exceeds the {budget} s budget"
    measured = dict(report.user_properties).get("measured", "")
    _results[item.nodeid] = (number, title, tolerance, budget, report.outcome, call.duration, measured)


def _order(result):
    number = str(result[0])
    return int(number.rstrip("abcdefgh")), number


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, tol, budget, outcome, seconds, measured in sorted(_results.values(), key=_order):
        status = "PASS" if outcome == "passed" else "FAIL"
        limit = f" / {budget} s" if budget is not None else ""
        detail = f" | {measured}" if measured else ""
        terminalreporter.write_line(f"{status} [{number:>2}] {title} (tolerance: {tol}){detail} | {seconds:.1f} s{limit}")

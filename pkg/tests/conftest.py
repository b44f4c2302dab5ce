"""Collects the acceptance results and prints one line per criterion."""

import pytest

_RESULTS: dict = {}


def pytest_runtest_logreport(report):
    mark = getattr(report, "acceptance", None)
    if mark is None:
        return
    n, title = mark
    if report.when == "call" or report.failed or report.skipped:
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _, prev, details = _RESULTS.get(n, (title, "PASS", []))
        details += [v for k, v in report.user_properties if k == "detail" and v not in details]
        _RESULTS[n] = (title, status if prev == "PASS" else prev, details)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        outcome.get_result().acceptance = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, status, detail = _RESULTS[n]
        line = f"criterion {n:2d}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{'; '.join(detail)}]" if detail else ""))

"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS: dict[str, tuple[str, float, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test that decides one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    name = marker.args[0]
    if report.when == "setup" and report.passed:
        return
    detail = getattr(item, "criterion_detail", "")
    _RESULTS[name] = ("PASS" if report.passed else "FAIL", report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, seconds, detail) in _RESULTS.items():
        extra = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"{status}  {name}  ({seconds:.1f} s){extra}")

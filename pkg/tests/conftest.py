"""Collects the acceptance criteria outcomes and prints one line per criterion."""

import pytest

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title, budget): acceptance criterion with a runtime budget in seconds")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[:2]))


@pytest.hookimpl(trylast=True)
def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    key = tuple(crit)
    passed, seconds = _outcomes.get(key, (True, 0.0))
    if report.when == "call":
        seconds += report.duration
    if report.failed or (report.when == "call" and report.skipped):
        passed = False
    _outcomes[key] = (passed, seconds)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (passed, seconds) in sorted(_outcomes.items()):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}  ({seconds:.1f} s)")

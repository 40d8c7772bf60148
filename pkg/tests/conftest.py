import platform
import sys

import pytest

RUNTIME_OK = sys.platform.startswith("linux") and platform.machine() == "x86_64"

_criteria: dict[int, tuple[str, str]] = {}


def pytest_collection_modifyitems(config, items):
    if RUNTIME_OK:
        return
    skip = pytest.mark.skip(reason="needs Linux x86-64 with ptrace")
    for item in items:
        if "runtime" in item.keywords:
            item.add_marker(skip)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _criteria[number] = (title, "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {title}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")

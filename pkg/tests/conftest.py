"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_CRITERIA = {}   # nodeid -> (number, title)
_OUTCOME = {}    # number -> "PASS" | "FAIL"
_DETAIL = {}     # number -> free text recorded by the test


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = tuple(mark.args)


@pytest.fixture
def detail(request):
    """``detail("text")`` attaches a measurement to the criterion line."""
    mark = request.node.get_closest_marker("criterion")

    def put(text):
        if mark is not None:
            _DETAIL[mark.args[0]] = text
    return put


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    number = _CRITERIA[report.nodeid][0]
    if report.failed:
        _OUTCOME[number] = "FAIL"
    elif report.when == "call" and report.passed:
        _OUTCOME.setdefault(number, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    titles = {n: t for n, t in _CRITERIA.values()}
    for n in sorted(titles):
        status = _OUTCOME.get(n, "NOT RUN")
        extra = f"  [{_DETAIL[n]}]" if n in _DETAIL else ""
        terminalreporter.write_line(f"criterion {n} {titles[n]}: {status}{extra}")

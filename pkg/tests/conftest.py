"""Collect acceptance outcomes and print one line per criterion after the run."""
import pytest

_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or report.outcome != "passed":
        number, title = marker.args
        measured = dict(item.user_properties).get("measured", "")
        previous = _results.get(number)
        ok = report.outcome == "passed" and (previous is None or previous[1])
        _results[number] = (title, ok, measured)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_results):
        title, ok, measured = _results[number]
        line = f"{'PASS' if ok else 'FAIL'}  {number:>2}. {title}"
        terminalreporter.write_line(f"{line}  [{measured}]" if measured else line)

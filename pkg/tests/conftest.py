"""Collects the acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(report.user_properties).get("measured", "")
        _OUTCOMES[number] = (title, report.outcome, report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        title, outcome, duration, detail = _OUTCOMES[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number:2d}: {verdict}  {title}  [{duration:.1f}s]"
        if detail:
            line += f"  {detail}"
        terminalreporter.write_line(line)

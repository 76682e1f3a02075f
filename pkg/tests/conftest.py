import pytest

_results: dict[int, tuple[str, str, float, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed:
        detail = report.longreprtext.strip().splitlines()[-1][:160] if report.longreprtext else detail
    _results[number] = ("PASS" if report.passed else "FAIL", title, report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title, seconds, detail = _results[number]
        line = f"criterion {number:2d}: {status}  {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))

"""Collects ``@pytest.mark.criterion`` outcomes and prints one line per criterion."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.skipped or report.failed):
        return
    entry = _RESULTS.setdefault(marker.args[0], {"statuses": [], "details": []})
    if report.skipped:
        entry["statuses"].append("SKIP")
        entry["details"].append("skipped: " + str(report.longrepr[2]).removeprefix("Skipped: "))
    else:
        entry["statuses"].append("PASS" if report.passed else "FAIL")
        entry["details"].extend(str(v) for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, entry in _RESULTS.items():
        statuses = entry["statuses"]
        status = "FAIL" if "FAIL" in statuses else "PASS" if "PASS" in statuses else "SKIP"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"{status:4}  {name}" + (f"  ({detail})" if detail else ""))

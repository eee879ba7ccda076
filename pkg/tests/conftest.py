"""Per-criterion pass/fail summary for the acceptance suite.

Tests marked ``@pytest.mark.criterion(n)`` report under criterion n; a
criterion passes when every test carrying its number passed. Tests may attach
a one-line detail through ``record_property("detail", ...)``.
"""
import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number this test checks")
    config.addinivalue_line("markers", "slow: trains students; hours on one core")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when != "call" and report.passed:
        return
    entry = _RESULTS.setdefault(marker.args[0], {"ok": True, "details": []})
    if not report.passed:
        entry["ok"] = False
    if report.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        entry = _RESULTS[n]
        detail = "; ".join(dict.fromkeys(entry["details"]))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if entry['ok'] else 'FAIL'}  {detail}")

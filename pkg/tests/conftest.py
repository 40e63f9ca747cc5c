import pytest

_OUTCOMES: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        details = [v for k, v in item.user_properties if k == "detail"]
        _OUTCOMES.setdefault(marker.args[0], []).append(
            (item.name, report.outcome == "passed", "; ".join(details)))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        runs = _OUTCOMES[n]
        ok = all(passed for _, passed, _ in runs)
        detail = " | ".join(f"{name}: {d}" if d else name for name, _, d in runs)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

import pytest
from hypothesis import HealthCheck, settings

from unikd import diffcore

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

diffcore.tune_allocator()

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running behavioral runs (the slow tier)")
    config.addinivalue_line("markers", "criterion(n, title): the test decides acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    detail = next((v for k, v in item.user_properties if k == "detail"), "")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _CRITERIA[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        line = f"criterion {n}: {status}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))

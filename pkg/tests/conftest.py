import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("weakts", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("weakts")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, driven by the real test outcome
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    _criteria[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, detail = _criteria[number]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)

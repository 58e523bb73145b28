import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def model():
    from quadrl.dynamics import RobotModel

    return RobotModel()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary: one PASS/FAIL line per criterion ----------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    ok = _CRITERIA.setdefault(mark.args[0], {})
    if rep.when == "call" or rep.failed or rep.skipped:
        ok[item.name] = ok.get(item.name, True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        tests = _CRITERIA[n]
        status = "PASS" if all(tests.values()) else "FAIL"
        passed = sum(tests.values())
        terminalreporter.write_line(f"criterion {n}: {status} ({passed}/{len(tests)} checks)")

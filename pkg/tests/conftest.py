import numpy as np
import pytest
from hypothesis import settings

from magtrack.field_models import Cylinder, Sphere
from magtrack.synth import SensorArray

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

SPHERE = Sphere(1.6875, 7.3e-3)
ROD = Cylinder(5e-3, 20e-3, 1.05e6)
POLE = Cylinder(2.5e-3, 25e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid16():
    return SensorArray.grid()


# ---- acceptance reporting --------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    n, title = marker.args
    if report.when == "setup" and report.passed:
        return
    detail = next((v for k, v in item.user_properties if k == "detail"), "")
    _CRITERIA[n] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}" + (f"  [{detail}]" if detail else ""))

import os
import re
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_geom():
    from fxi.geometry import DetectorGeometry

    return DetectorGeometry.pnccd_1024().binned(16)


@pytest.fixture(scope="session")
def small_geom():
    """32 x 32 detector with the same q range as the desk geometry."""
    from fxi.geometry import DetectorGeometry

    return DetectorGeometry.pnccd_1024().binned(32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_criteria = {}


def pytest_runtest_logreport(report):
    # acceptance tests are named test_cNN_<what>
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if m is None:
        return
    if report.when == "call" or report.outcome != "passed":
        key = f"C{int(m.group(1)):02d}"
        _criteria[key] = (report.outcome, dict(report.user_properties).get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        outcome, detail = _criteria[key]
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"{key}: {verdict}  {detail}")

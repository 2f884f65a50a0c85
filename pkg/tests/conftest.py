import sys

import numpy as np
import pytest

from drivetel.mapmatch import RoadNetwork, RoadSegment

M_PER_DEG = 6371000.0 * np.pi / 180.0


def offset(lat0, lon0, north_m, east_m):
    """(lat, lon) of a point displaced by metres from (lat0, lon0)."""
    return lat0 + north_m / M_PER_DEG, lon0 + east_m / (M_PER_DEG * np.cos(np.radians(lat0)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def straight_network():
    """One 200 m east-west segment and a parallel one 40 m north."""
    lat0, lon0 = 37.33, -121.89
    a = RoadSegment("a", [offset(lat0, lon0, 0, 0), offset(lat0, lon0, 0, 200)], True)
    b = RoadSegment("b", [offset(lat0, lon0, 40, 0), offset(lat0, lon0, 40, 200)], False)
    return RoadNetwork([a, b], {"a": [], "b": []})


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)

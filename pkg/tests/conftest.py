import sys
from datetime import date, datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from patrolscope.corpus import Station, StationIndex, StudyWindow  # noqa: E402
from patrolscope.geo import ConvexPolygon, encode_geohash  # noqa: E402
from patrolscope.officers import HomeLocation  # noqa: E402

TZ = "America/New_York"
STATION_CENTER = (40.0, -75.0)
HOME = (40.01, -75.01)
PATROL = (40.005, -74.995)
ELSEWHERE = (40.02, -74.98)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def utc(y, m, d, hh=0, mm=0, ss=0):
    return datetime(y, m, d, hh, mm, ss, tzinfo=timezone.utc).timestamp()


def square(lat, lon, half_deg=0.0005):
    return ConvexPolygon.from_lonlat([(lon - half_deg, lat - half_deg), (lon + half_deg, lat - half_deg),
                                      (lon + half_deg, lat + half_deg), (lon - half_deg, lat + half_deg)])


@pytest.fixture
def window():
    return StudyWindow(date(2017, 6, 1), date(2017, 7, 1), {"C1": TZ})


@pytest.fixture
def stations():
    return [Station("S1", "C1", square(*STATION_CENTER)),
            Station("S2", "C1", square(40.03, -75.03))]


@pytest.fixture
def station_index(stations):
    return StationIndex(stations)


@pytest.fixture
def homes():
    cell = encode_geohash(*HOME, 7)
    return HomeLocation("d1", "H1", cell, 10), None


def trace(points, device_id="d1"):
    """Ping frame from (ts, (lat, lon)) pairs."""
    return pd.DataFrame({"device_id": device_id,
                         "ts": np.array([t for t, _ in points], dtype=float),
                         "lat": [p[0] for _, p in points],
                         "lon": [p[1] for _, p in points]})


def day_trace(day, home_h, station_in_h, patrol_hours, station_out_h, home_back_h, extra=()):
    """Home -> station -> patrol -> station -> home on 2017-06-``day`` (UTC hours)."""
    base = utc(2017, 6, day)
    pts = [(base + home_h * 3600, HOME), (base + station_in_h * 3600, STATION_CENTER)]
    pts += [(base + h * 3600, PATROL) for h in patrol_hours]
    pts += [(base + station_out_h * 3600, STATION_CENTER), (base + home_back_h * 3600, HOME)]
    pts += [(base + h * 3600, p) for h, p in extra]
    return sorted(pts)

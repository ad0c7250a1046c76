import math

import numpy as np
import pandas as pd
import pytest

from patrolscope.corpus import BlockGroup, StudyWindow
from patrolscope.geo import EARTH_RADIUS_M
from patrolscope.presence import (
    PresenceAggregator,
    PresenceConfig,
    aggregate_presence,
    assign_dwell,
    presence_vector,
    shift_hour_index,
    speed_filter,
)
from patrolscope.shifts import Shift

H = 3600.0


def box(bg_id, lon0, lat0, w=0.05, h=0.05, city="C1"):
    ring = np.array([(lon0, lat0), (lon0 + w, lat0), (lon0 + w, lat0 + h), (lon0, lat0 + h)])
    return BlockGroup(bg_id, city, ring, {})


def shift(ts, lat, lon, start=None, city="C1"):
    ts = np.asarray(ts, float)
    start = ts[0] if start is None else start
    return Shift("d", start, ts[-1], ts, np.asarray(lat, float), np.asarray(lon, float),
                 start - H, ts[-1] + H, city_id=city)


def test_half_gap_dwell():
    np.testing.assert_allclose(assign_dwell(np.array([0, 10, 20]) * 60), np.array([5, 10, 5]) * 60)
    d = assign_dwell(np.array([0, 10, 40]) * 60)
    np.testing.assert_allclose(d, np.array([5, 20, 15]) * 60)
    assert d.sum() == 40 * 60
    np.testing.assert_array_equal(assign_dwell([123.0]), [0.0])
    assert assign_dwell([]).size == 0
    with pytest.raises(ValueError):
        assign_dwell([0, 10, 5])


def test_one_bg_gets_shift_span():
    ts = np.arange(0, 8 * H + 1, 600) + 1_500_000_000
    s = shift(ts, np.full(ts.size, 40.02), np.full(ts.size, -74.98))
    cells, rep = aggregate_presence([s], [box("A", -75.0, 40.0), box("B", -75.1, 40.0)])
    assert cells.set_index("bg_id")["hours"].to_dict() == {"A": 8.0, "B": 0.0}
    assert rep.unassigned_seconds == 0 and rep.assigned_seconds == 8 * H
    hour_cols = [f"hour_{h:02d}" for h in range(1, 13)]
    assert cells[hour_cols].sum(axis=1).tolist() == pytest.approx(cells["hours"].tolist())
    assert cells.loc[cells.bg_id == "A", "shift_count"].item() == 1


def test_fast_ping_excluded():
    # 2,000 m north in one minute is about 74.6 mph
    dlat = 2000 / (math.pi / 180 * EARTH_RADIUS_M)
    lat = np.array([40.01, 40.01 + dlat, 40.01, 40.01])
    ts = np.array([0.0, 60.0, 600.0, 1200.0])
    keep = speed_filter(ts, lat, np.full(4, -74.98), 50.0)
    assert keep.tolist() == [True, False, True, True]
    # a 75 mph cap would keep it
    assert speed_filter(ts, lat, np.full(4, -74.98), 75.0).all()
    cells, rep = aggregate_presence([shift(ts, lat, np.full(4, -74.98))], [box("A", -75.0, 40.0)])
    assert rep.n_speed_excluded == 1
    # the excluded ping's 5-minute share is dropped; neighbors keep theirs
    assert cells["hours"].item() == pytest.approx((1200 - 300) / H)
    assert rep.unfiltered_seconds == 1200


def test_retained_reference_vs_raw():
    # a glitch far away, then a return: raw reference also drops the return
    lat = np.array([40.01, 41.0, 40.01])
    ts = np.array([0.0, 60.0, 120.0])
    lon = np.full(3, -74.98)
    assert speed_filter(ts, lat, lon, 50.0).tolist() == [True, False, True]
    assert speed_filter(ts, lat, lon, 50.0, reference="raw").tolist() == [True, False, False]
    assert speed_filter(ts, lat, lon, None).all()


def test_unassigned_bucket():
    ts = np.array([0.0, 600.0, 1200.0])
    s = shift(ts, [40.01, 45.0, 40.01], [-74.98, -74.98, -74.98])
    cells, rep = aggregate_presence([s], [box("A", -75.0, 40.0)], PresenceConfig(speed_cap_mph=None))
    assert rep.n_unassigned == 1 and rep.unassigned_seconds == 600
    assert cells["hours"].item() * H + rep.unassigned_seconds == rep.filtered_seconds == 1200


def test_shift_hour_index():
    assert shift_hour_index([0, 1, 3600, 3601, 7200, 50 * 3600], 0).tolist() == [1, 1, 1, 2, 2, 12]


def test_weekday_daytime_filter():
    # Monday 2017-06-05 10:00 and 20:00 New York time
    t10 = pd.Timestamp("2017-06-05 10:00", tz="America/New_York").timestamp()
    t20 = pd.Timestamp("2017-06-05 20:00", tz="America/New_York").timestamp()
    ts = np.concatenate([t10 + np.arange(3) * 600, t20 + np.arange(3) * 600])
    s = shift(ts, np.full(6, 40.01), np.full(6, -74.98))
    win = StudyWindow(pd.Timestamp("2017-06-01").date(), pd.Timestamp("2017-07-01").date(),
                      {"C1": "America/New_York"})
    bgs = [box("A", -75.0, 40.0)]
    base, _ = aggregate_presence([s], bgs, PresenceConfig(speed_cap_mph=None), window=win)
    off, rep = aggregate_presence([s], bgs, PresenceConfig(speed_cap_mph=None, exclude_weekday_9to5=True),
                                  window=win)
    assert rep.n_time_excluded == 3
    dwell = assign_dwell(ts)
    assert off["hours"].item() == pytest.approx(dwell[3:].sum() / H)
    assert base["hours"].item() == pytest.approx(dwell.sum() / H)


def test_presence_vector():
    cells = pd.DataFrame({"bg_id": ["a", "b", "c"], "hours": [0.0, 1.0, 26.685]})
    v = presence_vector(cells, "arsinh")
    assert v["a"] == 0.0
    assert v["b"] == pytest.approx(math.log(1 + math.sqrt(2)), abs=1e-12)
    assert v["b"] == pytest.approx(0.881374, abs=1e-6)
    assert v["c"] == pytest.approx(3.9775, abs=1e-4)
    assert presence_vector(cells)["c"] == 26.685
    with pytest.raises(ValueError):
        presence_vector(cells, "log")


def test_aggregator_estimator_matches_function():
    rng = np.random.default_rng(3)
    shifts = []
    for k in range(20):
        ts = np.cumsum(rng.integers(60, 1200, 30)).astype(float) + k * 86400
        shifts.append(shift(ts, 40.0 + rng.uniform(0, 0.05, 30), -75.1 + rng.uniform(0, 0.1, 30)))
    bgs = [box("A", -75.0, 40.0), box("B", -75.1, 40.0, w=0.1 - 1e-9)]
    cells = PresenceAggregator(blockgroups=bgs).fit().transform(shifts)
    ref, _ = aggregate_presence(shifts, bgs)
    pd.testing.assert_frame_equal(cells, ref)
    with pytest.raises(ValueError):
        PresenceConfig(speed_reference="nearest")
    with pytest.raises(ValueError):
        PresenceConfig(speed_cap_mph=0)

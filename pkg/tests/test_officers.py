from datetime import date

import numpy as np
import pytest

from conftest import HOME, PATROL, STATION_CENTER, TZ, trace, utc
from oracles import station_days_by_month
from patrolscope.corpus import BlockGroup, BlockGroupIndex, StudyWindow
from patrolscope.geo import encode_geohash, geohash_center
from patrolscope.officers import (
    HomeLocation,
    OfficerIdentifier,
    department_composition,
    impute_device_race,
    infer_home,
    infer_homes,
    qualify_months,
)
from patrolscope.validation import check_pings

A = (40.01, -75.01)
B = (40.02, -75.02)


def station_visits(days, per_day=1, hour=16):
    return [(utc(2017, 6, d, hour, k), STATION_CENTER) for d in days for k in range(per_day)]


@pytest.mark.parametrize("n_days,qualified", [(4, False), (5, True), (6, True)])
def test_station_day_threshold(n_days, qualified, station_index, window):
    pts = station_visits(range(1, n_days + 1))
    stream = check_pings(trace(pts), station_index)
    (q,) = qualify_months(stream, station_index, window)
    assert q.station_days == n_days and q.qualified is qualified and q.city_id == "C1"
    assert station_days_by_month([t for t, _ in pts], TZ) == {"2017-06": n_days}


def test_many_pings_one_day_count_once(station_index, window):
    stream = check_pings(trace(station_visits([3], per_day=5)), station_index)
    (q,) = qualify_months(stream, station_index, window)
    assert q.station_days == 1 and not q.qualified


def test_days_are_local_calendar_days(station_index, window):
    # 02:00 and 03:00 UTC on June 2 are both still June 1 in New York
    pts = [(utc(2017, 6, 2, 2), STATION_CENTER), (utc(2017, 6, 2, 3), STATION_CENTER)]
    stream = check_pings(trace(pts), station_index)
    (q,) = qualify_months(stream, station_index, window, local_time=True)
    assert q.station_days == 1
    (q,) = qualify_months(stream, station_index, window, local_time=False)
    assert q.station_days == 1
    pts = [(utc(2017, 6, 2, 2), STATION_CENTER), (utc(2017, 6, 2, 12), STATION_CENTER)]
    stream = check_pings(trace(pts), station_index)
    assert qualify_months(stream, station_index, window)[0].station_days == 2
    assert qualify_months(stream, station_index, window, local_time=False)[0].station_days == 1


def test_months_qualify_independently(station_index):
    w = StudyWindow(date(2017, 6, 1), date(2017, 8, 1), {"C1": TZ})
    pts = station_visits(range(1, 6)) + [(utc(2017, 7, d, 16), STATION_CENTER) for d in (1, 2)]
    stream = check_pings(trace(pts), station_index)
    qs = qualify_months(stream, station_index, w)
    assert [(q.month, q.qualified) for q in qs] == [("2017-06", True), ("2017-07", False)]


def two_month_window():
    return StudyWindow(date(2017, 6, 1), date(2017, 8, 1), {"C1": TZ})


def test_home_is_modal_cell(station_index):
    pts = [(utc(2017, 6, 1, 1, i), A) for i in range(10)] + [(utc(2017, 6, 2, 1, i), B) for i in range(3)]
    h1, h2 = infer_home(check_pings(trace(pts), station_index), station_index, two_month_window())
    assert h1.home_cell == encode_geohash(*A) and h1.support == 10 and h2 is None


def test_home_tie_goes_to_smaller_code(station_index):
    pts = [(utc(2017, 6, 1, 1, i), A) for i in range(5)] + [(utc(2017, 6, 2, 1, i), B) for i in range(5)]
    h1, _ = infer_home(check_pings(trace(pts), station_index), station_index, two_month_window())
    assert h1.home_cell == min(encode_geohash(*A), encode_geohash(*B))


def test_home_absent_when_half_only_at_stations(station_index):
    pts = station_visits([1, 2]) + [(utc(2017, 7, 5, 1), A)]
    h1, h2 = infer_home(check_pings(trace(pts), station_index), station_index, two_month_window())
    assert h1 is None and h2.home_cell == encode_geohash(*A)


def test_home_invariant_under_reordering(station_index):
    rng = np.random.default_rng(0)
    pts = [(utc(2017, 6, 1) + int(rng.integers(0, 86400 * 50)), (A, B, PATROL)[rng.integers(3)])
           for _ in range(200)]
    frame = trace(pts)
    h = infer_home(check_pings(frame, station_index), station_index, two_month_window())
    shuffled = frame.sample(frac=1.0, random_state=1)
    assert infer_home(check_pings(shuffled, station_index), station_index, two_month_window()) == h


def _bg(bg_id, x0, shares):
    ring = np.array([(x0, 39.9), (x0 + 0.5, 39.9), (x0 + 0.5, 40.1), (x0, 40.1)])
    names = ("pct_white", "pct_black", "pct_hispanic", "pct_asian")
    return BlockGroup(bg_id, "C1", ring, dict(zip(names, shares)))


def test_race_imputation_passes_shares_through():
    idx = BlockGroupIndex([_bg("west", -75.5, (0.5, 0.3, 0.15, 0.05)), _bg("east", -75.0, (0.2, 0.7, 0.1, 0.0))])
    home = HomeLocation("d", "H1", encode_geohash(40.0, -75.2), 3)
    np.testing.assert_array_equal(impute_device_race(home, idx), [0.5, 0.3, 0.15, 0.05])
    assert impute_device_race(HomeLocation("d", "H1", encode_geohash(45.0, -75.2), 3), idx) is None
    assert impute_device_race(None, idx) is None
    v1, v2 = np.array([0.5, 0.3, 0.15, 0.05]), np.array([0.2, 0.7, 0.1, 0.0])
    np.testing.assert_allclose(department_composition([v1, v2]), (v1 + v2) / 2)
    assert department_composition([]) is None


def officer_month():
    pts = []
    for d in range(1, 8):
        pts += [(utc(2017, 6, d, h), HOME) for h in (0, 1, 2, 3, 4, 5, 22, 23)]
        pts += [(utc(2017, 6, d, 12), STATION_CENTER), (utc(2017, 6, d, 14), PATROL)]
    return trace(pts, "cop")


def test_identifier_estimator(stations, window):
    civilian = trace([(utc(2017, 6, d, 12), STATION_CENTER) for d in range(1, 4)], "civ")
    frame = officer_month()._append(civilian, ignore_index=True)
    oi = OfficerIdentifier(stations=stations, window=window).fit(frame)
    assert oi.officer_ids_ == ["cop"]
    assert oi.n_devices_ == 2
    assert oi.device_cities() == {"cop": "C1"}
    h = oi.homes_.set_index("device_id").loc["cop"]
    assert h["home_cell"] == encode_geohash(*HOME)
    assert oi.get_params()["station_days_min"] == 5
    homes = infer_homes(frame, stations, window, oi.qualifications_)
    assert homes["device_id"].tolist() == ["cop"]
    assert homes["home_cell"].tolist() == [h["home_cell"]]
    with pytest.raises(ValueError):
        OfficerIdentifier(stations=stations, window=window, station_days_min=0).fit(frame)


def test_identifier_composition(stations, window):
    c = geohash_center(encode_geohash(*HOME))
    bg = BlockGroup("b", "C1", np.array([(c.lon - 0.01, c.lat - 0.01), (c.lon + 0.01, c.lat - 0.01),
                                          (c.lon + 0.01, c.lat + 0.01), (c.lon - 0.01, c.lat + 0.01)]),
                    {"pct_white": 0.6, "pct_black": 0.2, "pct_hispanic": 0.1, "pct_asian": 0.1})
    comp = OfficerIdentifier(stations=stations, window=window).fit(officer_month()).department_composition([bg])
    row = comp.iloc[0]
    assert row["city_id"] == "C1" and row["n_devices"] == 1 and row["pct_black"] == 0.2

import numpy as np
import pandas as pd
import pytest

from conftest import ELSEWHERE, HOME, PATROL, STATION_CENTER, day_trace, trace, utc
from oracles import literal_shifts
from patrolscope.officers import OfficerIdentifier
from patrolscope.shifts import (
    HOME as L_HOME,
    OTHER as L_OTHER,
    STATION as L_STATION,
    Shift,
    ShiftDetector,
    detect_shifts,
    label_pings,
    patrol_pings_frame,
    shift_statistics,
    shifts_frame,
    shifts_from_frames,
)
from patrolscope.validation import check_pings

QUAL = {"2017-06"}
PATROL_HOURS = [8.5 + 0.5 * k for k in range(15)]  # 08:30 .. 15:30


def run(points, station_index, window, homes, **kw):
    stream = check_pings(trace(points), station_index)
    return detect_shifts(stream, homes, station_index, QUAL, window, **kw)


def oracle(points, station_index, window, homes, **kw):
    stream = check_pings(trace(points), station_index)
    code = {L_HOME: "H", L_STATION: "S", L_OTHER: "O"}
    labels = [code[v] for v in label_pings(stream, homes, window)]
    return literal_shifts(labels, stream["ts"].tolist(), **kw)


def test_reference_trace_one_shift(station_index, window, homes):
    pts = day_trace(5, 7, 8, PATROL_HOURS, 16 + 10 / 60, 17)
    (s,) = run(pts, station_index, window, homes)
    assert s.hours == pytest.approx(8 + 10 / 60, abs=1e-9)
    assert round(s.hours, 2) == 8.17
    assert len(s.patrol_ts) == 15 and np.all(np.diff(s.patrol_ts) > 0)
    assert s.station_in == s.station_out == "S1"
    assert s.bracket_home_before == utc(2017, 6, 5, 7) and s.bracket_home_after == utc(2017, 6, 5, 17)
    assert [(s.start_ts, s.end_ts)] == oracle(pts, station_index, window, homes)


def test_home_visit_breaks_pattern(station_index, window, homes):
    pts = day_trace(5, 7, 8, PATROL_HOURS, 16 + 10 / 60, 17, extra=[(12.01, HOME)])
    assert run(pts, station_index, window, homes) == []
    assert oracle(pts, station_index, window, homes) == []


def test_short_station_gap_emits_nothing(station_index, window, homes):
    pts = day_trace(5, 7, 8, [8.5, 9.5, 10.5], 11, 12)
    assert run(pts, station_index, window, homes) == []


def test_unqualified_month_emits_nothing(station_index, window, homes):
    stream = check_pings(trace(day_trace(5, 7, 8, PATROL_HOURS, 16.2, 17)), station_index)
    assert detect_shifts(stream, homes, station_index, {"2017-07"}, window) == []
    assert detect_shifts(stream, homes, station_index, set(), window) == []


def test_needs_patrol_between_station_visits(station_index, window, homes):
    base = utc(2017, 6, 5)
    pts = [(base + 7 * 3600, HOME), (base + 8 * 3600, STATION_CENTER), (base + 13 * 3600, STATION_CENTER),
           (base + 14 * 3600, PATROL), (base + 15 * 3600, HOME)]
    assert run(pts, station_index, window, homes) == []


def test_different_stations_allowed_unless_required(station_index, window, homes):
    pts = day_trace(5, 7, 8, PATROL_HOURS, 16.2, 17)
    pts = [(t, (40.03, -75.03)) if abs(t - utc(2017, 6, 5, 16, 12)) < 1 else (t, p) for t, p in pts]
    (s,) = run(pts, station_index, window, homes)
    assert (s.station_in, s.station_out) == ("S1", "S2")
    assert run(pts, station_index, window, homes, same_station=True) == []


def test_shift_max_h_knob(station_index, window, homes):
    pts = day_trace(5, 6, 7, [7.5 + k for k in range(11)], 19, 20)
    assert len(run(pts, station_index, window, homes)) == 1
    assert run(pts, station_index, window, homes, shift_max_h=8) == []


def test_consecutive_days_give_disjoint_shifts(station_index, window, homes):
    pts = []
    for d in range(5, 10):
        pts += day_trace(d, 7, 8, PATROL_HOURS, 16.2, 17)
    shifts = run(pts, station_index, window, homes)
    assert len(shifts) == 5
    for a, b in zip(shifts[:-1], shifts[1:]):
        assert a.end_ts < b.start_ts
    assert [(s.start_ts, s.end_ts) for s in shifts] == oracle(pts, station_index, window, homes)


def test_shift_statistics():
    def mk(h):
        return Shift("d", 0.0, h * 3600.0, np.empty(0), np.empty(0), np.empty(0), 0.0, 0.0)
    st = shift_statistics([mk(8), mk(10)])
    assert st["mean_hours"] == 9.0 and st["n_shifts"] == 2 and st["n_devices"] == 1
    assert shift_statistics([]) is None


def test_export_round_trip(station_index, window, homes):
    shifts = run(day_trace(5, 7, 8, PATROL_HOURS, 16.2, 17), station_index, window, homes)
    back = shifts_from_frames(shifts_frame(shifts), patrol_pings_frame(shifts))
    assert len(back) == 1
    a, b = shifts[0], back[0]
    assert (a.shift_id, a.start_ts, a.end_ts, a.station_in) == (b.shift_id, b.start_ts, b.end_ts, b.station_in)
    np.testing.assert_array_equal(a.patrol_ts, b.patrol_ts)
    np.testing.assert_array_equal(a.patrol_lat, b.patrol_lat)


def test_detector_estimator_end_to_end(stations, window):
    pts = []
    for d in range(1, 10):
        # enough night pings that home outnumbers the patrol cell
        pts += [(utc(2017, 6, d, h, m), HOME) for h in (0, 1, 2, 3, 4, 5, 20, 21, 22, 23) for m in (0, 30)]
        pts += day_trace(d, 7, 8, PATROL_HOURS, 16.2, 17)
    pts += [(utc(2017, 6, 20, 12), ELSEWHERE)]
    frame = trace(pts, "cop")
    oi = OfficerIdentifier(stations=stations, window=window).fit(frame)
    det = ShiftDetector(stations=stations, window=window).fit(oi)
    shifts = det.transform(frame)
    assert len(shifts) == 9 and all(s.city_id == "C1" for s in shifts)
    assert all(s.shift_id.startswith("cop#") for s in shifts)
    with pytest.raises(ValueError):
        ShiftDetector(stations=stations, window=window, shift_min_h=30).fit(oi)
    with pytest.raises(ValueError):
        ShiftDetector(stations=stations, window=window).fit()

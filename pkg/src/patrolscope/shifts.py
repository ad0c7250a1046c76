"""Patrol shift reconstruction.

Each ping of a device is labelled HOME (its geohash-7 equals the home cell
of the ping's half of the window), STATION (inside any station footprint)
or OTHER. A shift is the stretch between two consecutive HOME pings that
reaches a station, moves elsewhere, and reaches a station again:

    HOME -> STATION -> OTHER ... -> STATION -> HOME

Consecutive home pings partition the trace into disjoint brackets, so the
emitted shifts of a device never overlap.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._parallel import ordered_map
from .corpus import Ping, StationIndex, StudyWindow, local_calendar
from .geo import GeoPoint
from .officers import HomeLocation, MonthQualification, device_timezone
from .validation import annotate_pings, check_pings, check_positive

HOUR = 3600.0
SHIFT_MIN_H = 4.0
BRACKET_MAX_H = 24.0

HOME, STATION, OTHER = 0, 1, 2


@dataclass
class Shift:
    device_id: str
    start_ts: float
    end_ts: float
    patrol_ts: np.ndarray
    patrol_lat: np.ndarray
    patrol_lon: np.ndarray
    bracket_home_before: float
    bracket_home_after: float
    station_in: str = ""
    station_out: str = ""
    city_id: str | None = None
    shift_id: str = field(default="")

    @property
    def hours(self) -> float:
        return (self.end_ts - self.start_ts) / HOUR

    @property
    def patrol_pings(self) -> list[Ping]:
        return [Ping(self.device_id, float(t), GeoPoint(float(a), float(o)))
                for t, a, o in zip(self.patrol_ts, self.patrol_lat, self.patrol_lon)]


def label_pings(stream: pd.DataFrame, homes, window: StudyWindow, tz=None) -> np.ndarray:
    """HOME / STATION / OTHER code per ping; station membership wins."""
    h1, h2 = homes
    early, late = window.halves()
    months = local_calendar(stream["ts"].to_numpy(), tz or window.tz(None))["month"].to_numpy()
    home_cell = np.full(len(stream), None, dtype=object)
    if h1 is not None:
        home_cell[np.isin(months, early)] = h1.home_cell
    if h2 is not None:
        home_cell[np.isin(months, late)] = h2.home_cell
    labels = np.full(len(stream), OTHER, dtype=np.int8)
    labels[stream["cell"].to_numpy() == home_cell] = HOME
    labels[stream["station"].to_numpy() >= 0] = STATION
    return labels


def detect_shifts(stream: pd.DataFrame, homes, stations: StationIndex,
                  qualifications, window: StudyWindow, *,
                  shift_min_h: float = SHIFT_MIN_H,
                  bracket_max_h: float = BRACKET_MAX_H,
                  shift_max_h: float | None = None,
                  same_station: bool = False,
                  city_id=None, tz=None) -> list[Shift]:
    """Shifts of one device.

    ``homes`` is the (early, late) pair from :func:`infer_home`;
    ``qualifications`` are the device's month records (or a set of
    qualified month keys). A shift only counts when the month of its first
    station visit is qualified.
    """
    if len(stream) == 0:
        return []
    stream = stream if "station" in stream.columns else check_pings(stream, stations)
    if tz is None:
        tz = device_timezone(window, city_id)
    qualified = {q.month for q in qualifications if q.qualified} \
        if qualifications and isinstance(next(iter(qualifications)), MonthQualification) \
        else set(qualifications or ())
    if not qualified:
        return []

    labels = label_pings(stream, homes, window, tz)
    ts = stream["ts"].to_numpy()
    lat = stream["lat"].to_numpy()
    lon = stream["lon"].to_numpy()
    station = stream["station"].to_numpy()
    device_id = str(stream["device_id"].iloc[0])
    home_idx = np.flatnonzero(labels == HOME)

    shifts = []
    for i, j in zip(home_idx[:-1], home_idx[1:]):
        if j - i < 3 or ts[j] - ts[i] > bracket_max_h * HOUR:
            continue
        seg = np.arange(i + 1, j)
        at_station = seg[labels[seg] == STATION]
        if at_station.size < 2:
            continue
        a = at_station[0]
        if same_station:
            same = at_station[station[at_station] == station[a]]
            b = same[-1]
        else:
            b = at_station[-1]
        if b <= a:
            continue
        between = np.arange(a + 1, b)
        patrol = between[labels[between] == OTHER]
        if patrol.size == 0:
            continue
        length = ts[b] - ts[a]
        if length < shift_min_h * HOUR:
            continue
        if shift_max_h is not None and length > shift_max_h * HOUR:
            continue
        month = local_calendar(ts[a:a + 1], tz)["month"].iloc[0]
        if month not in qualified:
            continue
        shifts.append(Shift(
            device_id=device_id,
            start_ts=float(ts[a]),
            end_ts=float(ts[b]),
            patrol_ts=ts[patrol].copy(),
            patrol_lat=lat[patrol].copy(),
            patrol_lon=lon[patrol].copy(),
            bracket_home_before=float(ts[i]),
            bracket_home_after=float(ts[j]),
            station_in=str(stations.station_ids[station[a]]),
            station_out=str(stations.station_ids[station[b]]),
            city_id=city_id,
            shift_id=f"{device_id}#{len(shifts)}",
        ))
    return shifts


def shift_statistics(shifts: list[Shift]) -> dict | None:
    """Summary over a shift set; ``None`` when there are no shifts."""
    if not shifts:
        return None
    lengths = [s.hours for s in shifts]
    device_months = {(s.device_id, _utc_month(s.start_ts)) for s in shifts}
    return {
        "n_shifts": len(shifts),
        "n_devices": len({s.device_id for s in shifts}),
        "mean_hours": statistics.fmean(lengths),
        "median_hours": statistics.median(lengths),
        "shifts_per_device_month": len(shifts) / len(device_months),
    }


def _utc_month(ts: float) -> str:
    return pd.Timestamp(ts, unit="s", tz="UTC").strftime("%Y-%m")


def shifts_frame(shifts: list[Shift]) -> pd.DataFrame:
    cols = ["shift_id", "device_id", "city_id", "start_ts", "end_ts", "n_patrol_pings",
            "station_in", "station_out", "bracket_home_before", "bracket_home_after"]
    rows = [(s.shift_id, s.device_id, s.city_id, s.start_ts, s.end_ts, len(s.patrol_ts),
             s.station_in, s.station_out, s.bracket_home_before, s.bracket_home_after)
            for s in shifts]
    return pd.DataFrame(rows, columns=cols)


def patrol_pings_frame(shifts: list[Shift]) -> pd.DataFrame:
    parts = [pd.DataFrame({"shift_id": s.shift_id, "ts": s.patrol_ts,
                           "lat": s.patrol_lat, "lon": s.patrol_lon}) for s in shifts]
    if not parts:
        return pd.DataFrame(columns=["shift_id", "ts", "lat", "lon"])
    return pd.concat(parts, ignore_index=True)


def shifts_from_frames(shift_table: pd.DataFrame, pings: pd.DataFrame) -> list[Shift]:
    """Rebuild :class:`Shift` objects from the two exported tables."""
    by_shift = {k: g for k, g in pings.groupby("shift_id", sort=False)}
    out = []
    for r in shift_table.to_dict("records"):
        g = by_shift.get(r["shift_id"])
        empty = np.empty(0)
        city = r.get("city_id")
        out.append(Shift(
            device_id=str(r["device_id"]),
            start_ts=float(r["start_ts"]),
            end_ts=float(r["end_ts"]),
            patrol_ts=g["ts"].to_numpy(float) if g is not None else empty,
            patrol_lat=g["lat"].to_numpy(float) if g is not None else empty,
            patrol_lon=g["lon"].to_numpy(float) if g is not None else empty,
            bracket_home_before=float(r["bracket_home_before"]),
            bracket_home_after=float(r["bracket_home_after"]),
            station_in=str(r["station_in"]),
            station_out=str(r["station_out"]),
            city_id=None if pd.isna(city) else str(city),
            shift_id=str(r["shift_id"]),
        ))
    return out


def _detect_device(item, **kwargs):
    stream, homes, quals, city = item
    tz = device_timezone(kwargs["window"], city, kwargs.pop("local_time"))
    return detect_shifts(stream, homes, qualifications=quals, city_id=city, tz=tz, **kwargs)


class ShiftDetector(TransformerMixin, BaseEstimator):
    """Turn officer ping streams into patrol shifts.

    ``fit`` takes a fitted :class:`~patrolscope.officers.OfficerIdentifier`
    (or its ``qualifications_``/``homes_`` tables); ``transform`` takes a
    ping frame and returns a list of :class:`Shift`.
    """

    def __init__(self, stations=None, window=None, shift_min_h=SHIFT_MIN_H,
                 bracket_max_h=BRACKET_MAX_H, shift_max_h=None, same_station=False,
                 local_time=True, n_jobs=None):
        self.stations = stations
        self.window = window
        self.shift_min_h = shift_min_h
        self.bracket_max_h = bracket_max_h
        self.shift_max_h = shift_max_h
        self.same_station = same_station
        self.local_time = local_time
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None, qualifications=None, homes=None):
        check_positive("shift_min_h", self.shift_min_h)
        check_positive("bracket_max_h", self.bracket_max_h)
        if self.shift_min_h > self.bracket_max_h:
            raise ValueError("shift_min_h cannot exceed bracket_max_h")
        if X is not None and hasattr(X, "qualifications_"):
            qualifications, homes = X.qualifications_, X.homes_
        if qualifications is None or homes is None:
            raise ValueError("fit needs qualifications and homes")
        self.qualifications_ = {}
        for r in qualifications.to_dict("records"):
            self.qualifications_.setdefault(str(r["device_id"]), []).append(
                MonthQualification(**r))
        self.homes_ = {}
        for r in homes.to_dict("records"):
            h = HomeLocation(**r)
            pair = self.homes_.setdefault(h.device_id, [None, None])
            pair[0 if h.half == "H1" else 1] = h
        self.cities_ = {}
        for device_id, quals in self.qualifications_.items():
            qual = [q for q in quals if q.qualified]
            if qual:
                tally = {}
                for q in qual:
                    tally[q.city_id] = tally.get(q.city_id, 0) + 1
                self.cities_[device_id] = min(tally.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        return self

    def transform(self, X) -> list[Shift]:
        check_is_fitted(self, "cities_")
        index = StationIndex(self.stations or [])
        officers = sorted(self.cities_)
        pings = check_pings(X)
        pings = pings[pings["device_id"].isin(officers)].reset_index(drop=True)
        annotate_pings(pings, index)
        items = []
        for device_id, stream in pings.groupby("device_id", sort=True):
            homes = tuple(self.homes_.get(device_id, (None, None)))
            if homes == (None, None):
                continue
            items.append((stream.reset_index(drop=True), homes,
                          self.qualifications_[device_id], self.cities_[device_id]))
        scan = partial(_detect_device, stations=index, window=self.window,
                       shift_min_h=self.shift_min_h, bracket_max_h=self.bracket_max_h,
                       shift_max_h=self.shift_max_h, same_station=self.same_station,
                       local_time=self.local_time)
        return [s for shifts in ordered_map(scan, items, self.n_jobs) for s in shifts]

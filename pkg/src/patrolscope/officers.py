"""Which devices belong to police employees, and where they live.

A device-month qualifies when the device pings inside a station footprint
on at least five distinct local calendar days. Each device gets two home
cells (early and late half of the study window): the modal geohash-7 of its
pings outside every station footprint.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass
from functools import partial

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._parallel import ordered_map
from .corpus import BlockGroupIndex, StationIndex, StudyWindow, local_calendar
from .geo import geohash_center
from .validation import annotate_pings, check_pings

logger = logging.getLogger(__name__)

STATION_DAYS_MIN = 5


@dataclass(frozen=True)
class MonthQualification:
    device_id: str
    month: str
    station_days: int
    qualified: bool
    city_id: str


@dataclass(frozen=True)
class HomeLocation:
    device_id: str
    half: str  # "H1" or "H2"
    home_cell: str
    support: int


def device_timezone(window: StudyWindow, city_id, local_time: bool = True):
    if not local_time or city_id is None:
        return window.tz(None)
    return window.tz(city_id)


def qualify_months(stream: pd.DataFrame, stations: StationIndex, window: StudyWindow,
                   station_days_min: int = STATION_DAYS_MIN,
                   local_time: bool = True) -> list[MonthQualification]:
    """One record per month in which the device has any station ping.

    Days are counted per city, in that city's local time unless
    ``local_time`` is False; the month is attributed to the city with the
    most station days (ties go to the smaller city id).
    """
    stream = stream if "station" in stream.columns else check_pings(stream, stations)
    at_station = stream["station"].to_numpy() >= 0
    if not at_station.any():
        return []
    device_id = str(stream["device_id"].iloc[0])
    sub = stream.loc[at_station, ["ts", "station"]]
    cities = stations.city_ids[sub["station"].to_numpy()]
    days = {}
    for city in sorted(set(cities)):
        mask = cities == city
        cal = local_calendar(sub["ts"].to_numpy()[mask],
                             device_timezone(window, city, local_time))
        for month, group in cal.groupby("month"):
            days[(month, city)] = group["day"].nunique()
    out = []
    for month in sorted({m for m, _ in days}):
        counts = sorted(((-n, c) for (m, c), n in days.items() if m == month))
        n_days, city = -counts[0][0], counts[0][1]
        out.append(MonthQualification(device_id, month, int(n_days),
                                      n_days >= station_days_min, city))
    return out


def infer_home(stream: pd.DataFrame, stations: StationIndex, window: StudyWindow,
               tz=None) -> tuple[HomeLocation | None, HomeLocation | None]:
    """Modal non-station geohash-7 cell for each half of the window.

    Ties go to the lexicographically smallest code. A half without any
    non-station ping yields ``None``.
    """
    stream = stream if "station" in stream.columns else check_pings(stream, stations)
    device_id = str(stream["device_id"].iloc[0])
    away = stream[stream["station"].to_numpy() < 0]
    months = local_calendar(away["ts"].to_numpy(), tz or window.tz(None))["month"].to_numpy()
    cells = away["cell"].to_numpy()
    homes = []
    for label, half_months in zip(("H1", "H2"), window.halves()):
        in_half = np.isin(months, half_months)
        tally = Counter(cells[in_half])
        if not tally:
            homes.append(None)
            continue
        cell, support = min(tally.items(), key=lambda kv: (-kv[1], kv[0]))
        homes.append(HomeLocation(device_id, label, str(cell), int(support)))
    return homes[0], homes[1]


def impute_device_race(home: HomeLocation | None, blockgroups: BlockGroupIndex):
    """Race-share vector (white, black, hispanic, asian) of the home's block group.

    The home cell's center locates the block group. Returns ``None`` when
    the center falls outside every block group.
    """
    if home is None:
        return None
    center = geohash_center(home.home_cell)
    k = int(blockgroups.locate(np.array([center.lon]), np.array([center.lat]))[0])
    if k < 0:
        return None
    return blockgroups.blockgroups[k].race_shares()


def department_composition(vectors) -> np.ndarray | None:
    vectors = [v for v in vectors if v is not None]
    if not vectors:
        return None
    return np.mean(np.vstack(vectors), axis=0)


def _scan_device(stream, stations, window, station_days_min, local_time):
    quals = qualify_months(stream, stations, window, station_days_min, local_time)
    city = _modal_city(quals)
    homes = infer_home(stream, stations, window,
                       tz=device_timezone(window, city, local_time))
    return quals, homes


def _modal_city(quals):
    qualified = [q for q in quals if q.qualified] or quals
    if not qualified:
        return None
    tally = Counter(q.city_id for q in qualified)
    return min(tally.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def _home_job(item, stations, window, local_time):
    stream, city = item
    return infer_home(stream, stations, window, tz=device_timezone(window, city, local_time))


def infer_homes(pings: pd.DataFrame, stations, window: StudyWindow,
                qualifications: pd.DataFrame, local_time: bool = True,
                n_jobs=None) -> pd.DataFrame:
    """Home cells for the officer devices of a qualification table.

    Same result as ``OfficerIdentifier.homes_`` restricted to officers.
    """
    index = stations if isinstance(stations, StationIndex) else StationIndex(stations or [])
    cities = {}
    for device_id, group in qualifications.groupby("device_id", sort=True):
        recs = [MonthQualification(**{**r, "device_id": str(r["device_id"]),
                                      "qualified": bool(r["qualified"])})
                for r in group.to_dict("records")]
        if any(q.qualified for q in recs):
            cities[str(device_id)] = _modal_city(recs)
    pings = check_pings(pings)
    pings = pings[pings["device_id"].isin(cities)].reset_index(drop=True)
    annotate_pings(pings, index)
    items = [(s.reset_index(drop=True), cities[d]) for d, s in pings.groupby("device_id", sort=True)]
    results = ordered_map(partial(_home_job, stations=index, window=window,
                                  local_time=local_time), items, n_jobs)
    homes = [h for pair in results for h in pair if h is not None]
    return pd.DataFrame([asdict(h) for h in homes],
                        columns=["device_id", "half", "home_cell", "support"])


class OfficerIdentifier(BaseEstimator):
    """Flag police-employee device-months and infer device homes.

    Parameters
    ----------
    stations : list of Station
    window : StudyWindow
    station_days_min : int, default 5
        Distinct station days needed for a device-month to qualify.
    local_time : bool, default True
        Count days in each city's local timezone (UTC otherwise).
    n_jobs : int or None
        Worker processes; ``None`` reads ``PATROLSCOPE_WORKERS``.

    Attributes
    ----------
    qualifications_ : DataFrame
        device_id, month, station_days, qualified, city_id.
    homes_ : DataFrame
        device_id, half, home_cell, support.
    officer_ids_ : list of str
        Devices with at least one qualified month.
    """

    def __init__(self, stations=None, window=None, station_days_min=STATION_DAYS_MIN,
                 local_time=True, n_jobs=None):
        self.stations = stations
        self.window = window
        self.station_days_min = station_days_min
        self.local_time = local_time
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        if self.station_days_min < 1:
            raise ValueError("station_days_min must be at least 1")
        index = StationIndex(self.stations or [])
        pings = check_pings(X, annotate_with=index)
        streams = [s for _, s in pings.groupby("device_id", sort=True)]
        scan = partial(_scan_device, stations=index, window=self.window,
                       station_days_min=self.station_days_min, local_time=self.local_time)
        results = ordered_map(scan, streams, self.n_jobs)
        quals = [q for qs, _ in results for q in qs]
        homes = [h for _, hs in results for h in hs if h is not None]
        self.qualifications_ = pd.DataFrame(
            [asdict(q) for q in quals],
            columns=["device_id", "month", "station_days", "qualified", "city_id"])
        self.homes_ = pd.DataFrame([asdict(h) for h in homes],
                                   columns=["device_id", "half", "home_cell", "support"])
        self.officer_ids_ = sorted(
            self.qualifications_.loc[self.qualifications_["qualified"], "device_id"].unique())
        self.n_devices_ = len(streams)
        return self

    def device_cities(self) -> dict[str, str]:
        """Modal qualified city per officer device."""
        check_is_fitted(self, "qualifications_")
        out = {}
        for device_id, group in self.qualifications_.groupby("device_id", sort=True):
            city = _modal_city([MonthQualification(**r) for r in group.to_dict("records")])
            if device_id in self.officer_ids_:
                out[device_id] = city
        return out

    def department_composition(self, blockgroups) -> pd.DataFrame:
        """Mean imputed race shares of officer devices, by city.

        Uses each device's early-half home, falling back to the late half.
        Devices whose home is outside every block group are counted in
        ``n_unlocated``.
        """
        check_is_fitted(self, "homes_")
        index = blockgroups if isinstance(blockgroups, BlockGroupIndex) else BlockGroupIndex(blockgroups)
        homes = {(r.device_id, r.half): HomeLocation(**r._asdict())
                 for r in self.homes_.itertuples(index=False)}
        by_city: dict[str, list] = {}
        unlocated: Counter = Counter()
        for device_id, city in self.device_cities().items():
            home = homes.get((device_id, "H1")) or homes.get((device_id, "H2"))
            vec = impute_device_race(home, index)
            if vec is None:
                unlocated[city] += 1
                continue
            by_city.setdefault(city, []).append(vec)
        rows = []
        for city in sorted(set(by_city) | set(unlocated)):
            comp = department_composition(by_city.get(city, []))
            row = {"city_id": city, "n_devices": len(by_city.get(city, [])),
                   "n_unlocated": unlocated[city]}
            for g, v in zip(("white", "black", "hispanic", "asian"),
                            comp if comp is not None else [np.nan] * 4):
                row[f"pct_{g}"] = v
            rows.append(row)
        return pd.DataFrame(rows)

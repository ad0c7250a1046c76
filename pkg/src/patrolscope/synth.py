"""Synthetic cities with planted ground truth.

A city is a rectangular grid of block groups with spatially clustered
demographics, a handful of station buildings, officer agents who commute
home -> station -> patrol -> station -> home on working days, and civilians
who never spend five days in a month at a station. Every agent produces a
ping stream from one renewal process of inter-ping gaps (a shifted
log-normal whose mode is ``ping_gap_mode_min``) sampled against its
activity timeline and jittered with isotropic Gaussian GPS noise.

Each agent draws from its own child of ``SeedSequence(rng_seed)``, so the
corpus is identical for any worker count.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from functools import partial
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np
import pandas as pd

from ._parallel import ordered_map
from .corpus import BlockGroup, Station, StudyWindow, write_blockgroups, write_geofences, write_pings
from .econometrics.analysis import pearson
from .geo import EARTH_RADIUS_M, ConvexPolygon, decode_geohash_bbox, encode_geohash, encode_geohash_arrays

MIN = 60.0
HOUR = 3600.0
DAY = 86400.0
CITY_SPACING_M = 20_000.0
# start_ts/end_ts are the first and last pings whose noise-free position is
# inside the officer's station, before and after the patrol (what a perfect
# reader of the trace sees); planned_* are the schedule; observable is False
# when either end drew no such ping
SHIFT_COLUMNS = ["device_id", "city_id", "start_ts", "end_ts", "planned_start_ts",
                 "planned_end_ts", "observable"]


@dataclass
class SynthSpec:
    rng_seed: int = 0
    n_cities: int = 1
    grid_rows: int = 12
    grid_cols: int = 12
    cell_m: float = 500.0
    n_stations: int = 4
    n_officers: int = 50
    n_civilians: int = 150
    start: str = "2017-06-01"
    days: int = 30
    timezone: str = "America/New_York"
    origin_lat: float = 40.0
    origin_lon: float = -75.0
    shift_start_hour: float = 8.0
    shift_start_sd_h: float = 0.5
    shift_length_mean_h: float = 8.0
    shift_length_sd_h: float = 0.5
    work_days_per_week: int = 5
    commute_min: tuple = (20.0, 45.0)
    station_dwell_min: tuple = (30.0, 45.0)
    ping_gap_mode_min: float = 10.0
    ping_gap_floor_min: float = 1.0
    ping_gap_sigma: float = 0.6
    gps_noise_m: float = 25.0
    station_size_m: float = 120.0
    patrol_visit_mean_min: float = 40.0
    patrol_base: str = "gamma"  # "gamma" or "uniform"
    patrol_gamma_shape: float = 1.0
    patrol_race_coef: float = 0.0
    patrol_weights: list | None = None
    officer_home_black_majority_share: float | None = None
    civilian_station_visitor_share: float = 0.2
    employee_capture_rate: float = 0.8

    def __post_init__(self):
        self.commute_min = tuple(self.commute_min)
        self.station_dwell_min = tuple(self.station_dwell_min)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["commute_min"] = list(self.commute_min)
        d["station_dwell_min"] = list(self.station_dwell_min)
        return d

    def validate(self) -> None:
        for name in ("n_cities", "grid_rows", "grid_cols", "n_stations", "days"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("n_officers", "n_civilians"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("cell_m", "ping_gap_mode_min", "station_size_m", "patrol_visit_mean_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gps_noise_m < 0 or self.ping_gap_floor_min < 0:
            raise ValueError("gps_noise_m and ping_gap_floor_min must be non-negative")
        if self.ping_gap_floor_min >= self.ping_gap_mode_min:
            raise ValueError("ping_gap_floor_min must be below the modal gap")
        if not 0 <= self.work_days_per_week <= 7:
            raise ValueError("work_days_per_week must be within 0..7")
        if self.patrol_base not in ("gamma", "uniform"):
            raise ValueError("patrol_base must be 'gamma' or 'uniform'")
        if self.patrol_weights is not None:
            w = np.asarray(self.patrol_weights, dtype=float)
            if w.size != self.n_cities * self.grid_rows * self.grid_cols:
                raise ValueError("patrol_weights needs one weight per block group")
            if not (np.all(np.isfinite(w)) and np.all(w >= 0) and w.sum() > 0):
                raise ValueError("patrol_weights must be finite, non-negative, not all zero")
        longest = self.shift_length_mean_h + 3 * self.shift_length_sd_h
        bracket = longest + 2 * self.commute_min[1] / 60.0
        if bracket >= 24.0:
            raise ValueError(
                f"infeasible schedule: a {longest:.1f} h shift plus commutes spans "
                f"{bracket:.1f} h, beyond the 24 h home-to-home bracket")
        if self.shift_length_mean_h - 3 * self.shift_length_sd_h <= \
                2 * self.station_dwell_min[1] / 60.0:
            raise ValueError("infeasible schedule: shifts too short to leave room for patrol")
        if self.n_stations > self.grid_rows * self.grid_cols:
            raise ValueError("more stations than block groups")

    @property
    def window(self) -> StudyWindow:
        start = date.fromisoformat(self.start)
        return StudyWindow(start, start + timedelta(days=self.days),
                           {city_name(c): self.timezone for c in range(self.n_cities)})


def city_name(c: int) -> str:
    return f"C{c:02d}"


# ----------------------------------------------------------------------------
# geometry
# ----------------------------------------------------------------------------

@dataclass
class CityGeometry:
    city_id: str
    origin_lat: float
    origin_lon: float
    rows: int
    cols: int
    cell_m: float
    offset_x: float = 0.0

    def to_lonlat(self, x, y):
        lat = self.origin_lat + np.asarray(y) / EARTH_RADIUS_M * 180.0 / math.pi
        lon = self.origin_lon + (np.asarray(x) + self.offset_x) / (
            EARTH_RADIUS_M * math.cos(math.radians(self.origin_lat))) * 180.0 / math.pi
        return lon, lat

    def to_xy(self, lon, lat):
        y = (np.asarray(lat) - self.origin_lat) * math.pi / 180.0 * EARTH_RADIUS_M
        x = (np.asarray(lon) - self.origin_lon) * math.pi / 180.0 * (
            EARTH_RADIUS_M * math.cos(math.radians(self.origin_lat))) - self.offset_x
        return x, y

    @property
    def width(self) -> float:
        return self.cols * self.cell_m

    @property
    def height(self) -> float:
        return self.rows * self.cell_m

    def cell_of(self, x, y):
        col = np.clip((np.asarray(x) // self.cell_m).astype(int), 0, self.cols - 1)
        row = np.clip((np.asarray(y) // self.cell_m).astype(int), 0, self.rows - 1)
        return row * self.cols + col

    def cell_rect(self, k: int):
        r, c = divmod(k, self.cols)
        return c * self.cell_m, r * self.cell_m, (c + 1) * self.cell_m, (r + 1) * self.cell_m

    def bg_id(self, k: int) -> str:
        return f"{self.city_id}-{k:04d}"

    def ring(self, x0, y0, x1, y1) -> np.ndarray:
        lon, lat = self.to_lonlat(np.array([x0, x1, x1, x0]), np.array([y0, y0, y1, y1]))
        return np.column_stack([lon, lat])


@dataclass
class Place:
    x: float
    y: float
    station: int = -1  # index into the city's stations, -1 otherwise


# ----------------------------------------------------------------------------
# corpus containers
# ----------------------------------------------------------------------------

@dataclass
class GroundTruth:
    officer_ids: list[str]
    home_cells: dict[str, str]
    home_bg: dict[str, str]
    officer_city: dict[str, str]
    shifts: pd.DataFrame  # SHIFT_COLUMNS
    bg_hours: pd.DataFrame  # bg_id, city_id, weight, expected_hours, realized_hours
    department_pct_black: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "officer_ids": self.officer_ids,
            "home_cells": self.home_cells,
            "home_bg": self.home_bg,
            "officer_city": self.officer_city,
            "department_pct_black": self.department_pct_black,
            "shifts": self.shifts.to_dict("records"),
            "bg_hours": self.bg_hours.to_dict("records"),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        return cls(
            officer_ids=list(d["officer_ids"]),
            home_cells=dict(d["home_cells"]),
            home_bg=dict(d["home_bg"]),
            officer_city=dict(d["officer_city"]),
            department_pct_black=dict(d.get("department_pct_black", {})),
            shifts=pd.DataFrame(d["shifts"], columns=SHIFT_COLUMNS),
            bg_hours=pd.DataFrame(d["bg_hours"]),
        )


@dataclass
class SynthCorpus:
    spec: SynthSpec
    window: StudyWindow
    pings: pd.DataFrame
    stations: list[Station]
    blockgroups: list[BlockGroup]
    city_table: pd.DataFrame
    department_table: pd.DataFrame
    employee_counts: pd.DataFrame
    zip_crosswalk: pd.DataFrame
    zip_residents: pd.DataFrame
    arrests: pd.DataFrame
    stops: pd.DataFrame
    truth: GroundTruth

    def bg_frame(self) -> pd.DataFrame:
        from .corpus import blockgroups_frame
        return blockgroups_frame(self.blockgroups)

    def write(self, out_dir) -> Path:
        """Write corpus files, ``manifest.json`` and ``truth.json``; returns
        the manifest path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_pings(self.pings, out / "pings.csv")
        write_geofences(self.stations, out / "stations.geojson")
        write_blockgroups(self.blockgroups, out / "blockgroups.geojson", out / "blockgroups.csv")
        tables = {
            "city_table": self.city_table,
            "department_table": self.department_table,
            "employee_counts": self.employee_counts,
            "zip_crosswalk": self.zip_crosswalk,
            "zip_residents": self.zip_residents,
            "arrests": self.arrests,
            "stops": self.stops,
        }
        for name, table in tables.items():
            table.to_csv(out / f"{name}.csv", index=False)
        manifest = {
            "pings": "pings.csv",
            "geofences": "stations.geojson",
            "blockgroups_geometry": "blockgroups.geojson",
            "blockgroups_attributes": "blockgroups.csv",
            **{name: f"{name}.csv" for name in tables},
        }
        _dump_json(manifest, out / "manifest.json")
        _dump_json({"spec": self.spec.to_dict(), "window": self.window.to_dict(),
                    **self.truth.to_json()}, out / "truth.json")
        return out / "manifest.json"


def _dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# ----------------------------------------------------------------------------
# city construction
# ----------------------------------------------------------------------------

def _blob(u, v, rng, n=2):
    field_ = np.zeros_like(u)
    for _ in range(n):
        cu, cv = rng.uniform(0.1, 0.9, 2)
        s = rng.uniform(0.15, 0.3)
        field_ += np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * s * s))
    return field_ / field_.max()


def _build_city(c: int, spec: SynthSpec, rng: np.random.Generator):
    geom = CityGeometry(city_name(c), spec.origin_lat, spec.origin_lon, spec.grid_rows,
                        spec.grid_cols, spec.cell_m, offset_x=c * CITY_SPACING_M)
    n = spec.grid_rows * spec.grid_cols
    k = np.arange(n)
    u = ((k % spec.grid_cols) + 0.5) / spec.grid_cols
    v = ((k // spec.grid_cols) + 0.5) / spec.grid_rows
    conc = np.column_stack([
        np.full(n, 1.0),
        0.1 + 3.0 * _blob(u, v, rng),
        0.1 + 2.0 * _blob(u, v, rng),
        0.05 + 0.6 * _blob(u, v, rng, n=1),
    ])
    shares = np.vstack([rng.dirichlet(30 * row / row.sum()) for row in conc])
    population = np.round(rng.lognormal(math.log(1000), 0.3, n))
    black = shares[:, 1]
    college = np.clip(0.45 - 0.3 * black + rng.normal(0, 0.08, n), 0.02, 0.95)
    income = np.maximum(12.0, 25 + 90 * college + rng.normal(0, 8, n))
    ret = np.clip(0.78 - 0.2 * black + rng.normal(0, 0.04, n), 0.2, 0.99)
    homicides = rng.poisson(0.2 + 1.2 * black)
    if homicides.sum() == 0:
        homicides[rng.integers(n)] = 1
    cx = (k % spec.grid_cols + 0.5) * spec.cell_m
    cy = (k // spec.grid_cols + 0.5) * spec.cell_m
    hx, hy = [], []
    for kk in np.flatnonzero(homicides):
        x0, y0, x1, y1 = geom.cell_rect(kk)
        hx.extend(rng.uniform(x0, x1, homicides[kk]))
        hy.extend(rng.uniform(y0, y1, homicides[kk]))
    hx, hy = np.array(hx), np.array(hy)
    dist_km = np.sqrt((cx[:, None] - hx[None, :]) ** 2 + (cy[:, None] - hy[None, :]) ** 2).min(1) / 1000

    blockgroups = []
    for kk in range(n):
        attrs = {
            "population": float(population[kk]),
            "pct_white": float(shares[kk, 0]),
            "pct_black": float(shares[kk, 1]),
            "pct_hispanic": float(shares[kk, 2]),
            "pct_asian": float(shares[kk, 3]),
            "pct_college": float(college[kk]),
            "median_income_k": float(income[kk]),
            "census_return_rate": float(ret[kk]),
            "homicide_count": float(homicides[kk]),
            "dist_nearest_homicide_km": float(dist_km[kk]),
        }
        blockgroups.append(BlockGroup(geom.bg_id(kk), geom.city_id, geom.ring(*geom.cell_rect(kk)), attrs))

    city_shares = (shares * population[:, None]).sum(0) / population.sum()
    station_cells = rng.choice(n, size=spec.n_stations, replace=False)
    stations, station_places = [], []
    half = spec.station_size_m / 2
    for j, kk in enumerate(sorted(station_cells)):
        x0, y0, x1, y1 = geom.cell_rect(kk)
        sx = rng.uniform(x0 + half + 30, x1 - half - 30)
        sy = rng.uniform(y0 + half + 30, y1 - half - 30)
        ring = geom.ring(sx - half, sy - half, sx + half, sy + half)
        stations.append(Station(f"{geom.city_id}-S{j:02d}", geom.city_id,
                                ConvexPolygon.from_lonlat(ring)))
        station_places.append(Place(sx, sy, station=j))
    return {
        "geom": geom,
        "blockgroups": blockgroups,
        "shares": shares,
        "population": population,
        "city_shares": city_shares,
        "stations": stations,
        "station_places": station_places,
    }


def _patrol_weights(city, spec: SynthSpec, rng, c: int) -> np.ndarray:
    n = spec.grid_rows * spec.grid_cols
    if spec.patrol_weights is not None:
        return np.asarray(spec.patrol_weights, dtype=float)[c * n:(c + 1) * n]
    base = rng.gamma(spec.patrol_gamma_shape, 1.0, n) if spec.patrol_base == "gamma" else np.ones(n)
    rel_black = city["shares"][:, 1] / city["city_shares"][1]
    return base * (1.0 + spec.patrol_race_coef * rel_black)


# ----------------------------------------------------------------------------
# agents
# ----------------------------------------------------------------------------

@dataclass
class AgentPlan:
    device_id: str
    kind: str  # "officer" or "civilian"
    city: int
    home: Place
    home_cell: str
    home_bg: int
    station: int = -1
    days_off: tuple = ()
    work: Place | None = None
    visits_station: bool = False


def _segment_distance(p: Place, a: Place, b: Place) -> float:
    dx, dy = b.x - a.x, b.y - a.y
    L2 = dx * dx + dy * dy
    u = 0.0 if L2 == 0 else min(1.0, max(0.0, ((p.x - a.x) * dx + (p.y - a.y) * dy) / L2))
    return math.hypot(a.x + u * dx - p.x, a.y + u * dy - p.y)


def _route(rng, home: Place, station: Place, station_places, size) -> list[Place]:
    """Commute polyline that keeps clear of every other station footprint."""
    others = [s for s in station_places if s.station != station.station]
    clear = 0.75 * size + 50.0

    def ok(pts):
        return all(_segment_distance(s, a, b) > clear
                   for a, b in zip(pts[:-1], pts[1:]) for s in others)

    if ok([home, station]):
        return [home, station]
    for _ in range(200):
        w = Place((home.x + station.x) / 2 + rng.normal(0, 800),
                  (home.y + station.y) / 2 + rng.normal(0, 800))
        if ok([home, w, station]):
            return [home, w, station]
    return [home, station]


def _far_from_stations(x, y, station_places, margin):
    return all(math.hypot(x - s.x, y - s.y) > margin for s in station_places)


def _random_point(rng, geom, cells=None, avoid=None, margin=200.0):
    for _ in range(1000):
        k = int(rng.choice(cells)) if cells is not None else int(rng.integers(geom.rows * geom.cols))
        x0, y0, x1, y1 = geom.cell_rect(k)
        x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
        if avoid is None or _far_from_stations(x, y, avoid, margin):
            return x, y
    raise RuntimeError("could not place a point away from stations")


def _home_place(rng, geom, cells, probs, stations):
    """Home snapped to the center of its geohash-7 cell, inside the same block group."""
    for _ in range(1000):
        k = int(rng.choice(cells, p=probs))
        x0, y0, x1, y1 = geom.cell_rect(k)
        x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
        lon, lat = geom.to_lonlat(x, y)
        code = encode_geohash(float(lat), float(lon), 7)
        la0, la1, lo0, lo1 = decode_geohash_bbox(code)
        hx, hy = geom.to_xy((lo0 + lo1) / 2, (la0 + la1) / 2)
        hx, hy = float(hx), float(hy)
        if not (x0 + 1 < hx < x1 - 1 and y0 + 1 < hy < y1 - 1):
            continue
        if not _far_from_stations(hx, hy, stations, 250.0):
            continue
        return Place(hx, hy), code, k
    raise RuntimeError("could not place a home")


def _local_midnight(d: date, tz: ZoneInfo) -> float:
    return datetime(d.year, d.month, d.day, tzinfo=tz).timestamp()


class _Timeline:
    """Piecewise-linear positions over time; gaps are filled with home."""

    def __init__(self, home: Place):
        self.home = home
        self.segments = []  # (t0, t1, x0, y0, x1, y1, tag)

    def stay(self, t0, t1, p: Place, tag):
        if t1 > t0:
            self.segments.append((t0, t1, p.x, p.y, p.x, p.y, tag))

    def move(self, t0, t1, a: Place, b: Place, tag="travel"):
        if t1 > t0:
            self.segments.append((t0, t1, a.x, a.y, b.x, b.y, tag))

    def path(self, t0, t1, places: list[Place], tag="travel"):
        """Constant-speed travel along a polyline."""
        legs = [math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(places[:-1], places[1:])]
        total = sum(legs) or 1.0
        t = t0
        for (a, b), d in zip(zip(places[:-1], places[1:]), legs):
            t_next = t + (t1 - t0) * d / total
            self.move(t, t_next, a, b, tag)
            t = t_next

    def arrays(self, t_start, t_end):
        segs = sorted(self.segments)
        filled = []
        cursor = t_start
        for s in segs:
            if s[0] > cursor:
                filled.append((cursor, s[0], self.home.x, self.home.y, self.home.x, self.home.y, "home"))
            filled.append(s)
            cursor = max(cursor, s[1])
        if cursor < t_end:
            filled.append((cursor, t_end, self.home.x, self.home.y, self.home.x, self.home.y, "home"))
        cols = list(zip(*filled))
        return (np.array(cols[0]), np.array(cols[1]), np.array(cols[2]), np.array(cols[3]),
                np.array(cols[4]), np.array(cols[5]), np.array(cols[6], dtype=object))


def _ping_times(rng, spec: SynthSpec, t0: float, t1: float) -> np.ndarray:
    mode = spec.ping_gap_mode_min - spec.ping_gap_floor_min
    mu = math.log(mode) + spec.ping_gap_sigma ** 2
    mean_gap = (spec.ping_gap_floor_min + math.exp(mu + spec.ping_gap_sigma ** 2 / 2)) * MIN
    n = int((t1 - t0) / mean_gap * 1.3) + 50
    times = []
    t = t0 + rng.uniform(0, spec.ping_gap_mode_min * MIN)
    while t < t1:
        gaps = (spec.ping_gap_floor_min + rng.lognormal(mu, spec.ping_gap_sigma, n)) * MIN
        seq = t + np.cumsum(np.concatenate([[0.0], gaps]))
        times.append(seq[seq < t1])
        t = seq[-1]
    return np.floor(np.concatenate(times))


def _simulate_agent(plan: AgentPlan, seed: np.random.SeedSequence, spec: SynthSpec, cities,
                    weights):
    rng = np.random.default_rng(seed)
    city = cities[plan.city]
    geom: CityGeometry = city["geom"]
    tz = ZoneInfo(spec.timezone)
    window = spec.window
    t_start, t_end = float(window.start_ts), float(window.end_ts)
    tl = _Timeline(plan.home)
    shifts = []
    patrol_time = np.zeros(geom.rows * geom.cols)
    planned_patrol = 0.0
    first_day = window.start - timedelta(days=1)
    station_visit_days = set()
    if plan.visits_station:
        by_month = {}
        for d in range(spec.days):
            day = window.start + timedelta(days=d)
            by_month.setdefault((day.year, day.month), []).append(d)
        for days in by_month.values():
            k = int(rng.integers(1, 4))
            station_visit_days.update(int(x) for x in rng.choice(days, size=min(k, len(days)), replace=False))

    for d in range(-1, spec.days + 1):
        day = first_day + timedelta(days=d + 1)
        midnight = _local_midnight(day, tz)
        if plan.kind == "officer":
            if day.weekday() in plan.days_off:
                _outing(rng, tl, geom, midnight, plan, city)
                continue
            arrive = midnight + (spec.shift_start_hour + rng.normal(0, spec.shift_start_sd_h)) * HOUR
            length = float(np.clip(rng.normal(spec.shift_length_mean_h, spec.shift_length_sd_h),
                                   spec.shift_length_mean_h - 3 * spec.shift_length_sd_h,
                                   spec.shift_length_mean_h + 3 * spec.shift_length_sd_h)) * HOUR
            depart = arrive + length
            station = city["station_places"][plan.station]
            leave_home = arrive - rng.uniform(*spec.commute_min) * MIN
            back_home = depart + rng.uniform(*spec.commute_min) * MIN
            route = _route(rng, plan.home, station, city["station_places"], spec.station_size_m)
            tl.path(leave_home, arrive, route)
            dwell_in = rng.uniform(*spec.station_dwell_min) * MIN
            dwell_out = rng.uniform(*spec.station_dwell_min) * MIN
            tl.stay(arrive, arrive + dwell_in, station, "station")
            p_start, p_end = arrive + dwell_in, depart - dwell_out
            t = p_start
            while t < p_end:
                k = int(rng.choice(len(weights), p=weights / weights.sum()))
                x0, y0, x1, y1 = geom.cell_rect(k)
                for _ in range(100):
                    x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
                    lon, lat = geom.to_lonlat(x, y)
                    if _far_from_stations(x, y, city["station_places"], spec.station_size_m) and \
                            encode_geohash(float(lat), float(lon), 7) != plan.home_cell:
                        break
                stay = max(5 * MIN, rng.exponential(spec.patrol_visit_mean_min * MIN))
                t_next = min(p_end, t + stay)
                tl.stay(t, t_next, Place(x, y), "patrol")
                if t_start <= t and t_next <= t_end:
                    patrol_time[k] += t_next - t
                t = t_next
            tl.stay(p_end, depart, station, "station")
            tl.path(depart, back_home, route[::-1])
            if t_start <= arrive and depart < t_end:
                shifts.append((plan.device_id, geom.city_id, arrive, depart, leave_home,
                               p_start, p_end, back_home, station))
                planned_patrol += p_end - p_start
        else:
            if d in station_visit_days:
                station = city["station_places"][int(rng.integers(len(city["station_places"])))]
                t0 = midnight + rng.uniform(10, 16) * HOUR
                tl.stay(t0, t0 + rng.uniform(30, 60) * MIN, station, "station")
            elif day.weekday() < 5:
                t0 = midnight + rng.uniform(8, 9.5) * HOUR
                t1 = midnight + rng.uniform(16.5, 18) * HOUR
                tl.stay(t0, t1, plan.work, "work")
            else:
                _outing(rng, tl, geom, midnight, plan, city)

    seg = tl.arrays(t_start, t_end)
    ts = _ping_times(rng, spec, t_start, t_end)
    idx = np.searchsorted(seg[0], ts, side="right") - 1
    span = seg[1][idx] - seg[0][idx]
    frac = np.where(span > 0, (ts - seg[0][idx]) / np.where(span > 0, span, 1), 0.0)
    x = seg[2][idx] + frac * (seg[4][idx] - seg[2][idx])
    y = seg[3][idx] + frac * (seg[5][idx] - seg[3][idx])
    half = spec.station_size_m / 2
    observed = []
    for device_id, city_id, arrive, depart, leave, p_start, p_end, back, st in shifts:
        inside = (np.abs(x - st.x) <= half) & (np.abs(y - st.y) <= half)
        first = ts[inside & (ts >= leave) & (ts < p_start)]
        last = ts[inside & (ts >= p_end) & (ts <= back)]
        ok = first.size > 0 and last.size > 0
        observed.append((device_id, city_id, float(first[0]) if ok else arrive,
                         float(last[-1]) if ok else depart, arrive, depart, ok))
    shifts = observed
    if spec.gps_noise_m > 0:
        x = x + rng.normal(0, spec.gps_noise_m, ts.size)
        y = y + rng.normal(0, spec.gps_noise_m, ts.size)
    lon, lat = geom.to_lonlat(x, y)
    pings = pd.DataFrame({"device_id": plan.device_id, "ts": ts,
                          "lat": np.round(lat, 7), "lon": np.round(lon, 7)})
    return pings, shifts, patrol_time, planned_patrol


def _outing(rng, tl, geom, midnight, plan, city):
    if rng.random() < 0.6:
        x, y = _random_point(rng, geom, avoid=city["station_places"], margin=300.0)
        t0 = midnight + rng.uniform(10, 18) * HOUR
        tl.stay(t0, t0 + rng.uniform(1, 3) * HOUR, Place(x, y), "other")


def _plan_agents(spec: SynthSpec, cities, rng):
    city_sizes = rng.uniform(0.5, 1.5, spec.n_cities)
    officer_city = np.sort(rng.choice(spec.n_cities, size=spec.n_officers,
                                      p=city_sizes / city_sizes.sum()))
    plans = []
    n_cells = spec.grid_rows * spec.grid_cols
    for i in range(spec.n_officers):
        c = int(officer_city[i])
        city = cities[c]
        cells = np.arange(n_cells)
        probs = city["population"] / city["population"].sum()
        if spec.officer_home_black_majority_share is not None:
            majority = city["shares"][:, 1] > 0.5
            if majority.any() and (~majority).any():
                in_majority = rng.random() < spec.officer_home_black_majority_share
                cells = np.flatnonzero(majority if in_majority else ~majority)
                probs = city["population"][cells] / city["population"][cells].sum()
        home, code, k = _home_place(rng, city["geom"], cells, probs, city["station_places"])
        first_off = int(rng.integers(7))
        n_off = 7 - spec.work_days_per_week
        plans.append(AgentPlan(
            device_id=f"dev{i:05d}", kind="officer", city=c, home=home, home_cell=code,
            home_bg=k, station=int(rng.integers(len(city["station_places"]))),
            days_off=tuple((first_off + j) % 7 for j in range(n_off))))
    for i in range(spec.n_civilians):
        c = int(rng.integers(spec.n_cities))
        city = cities[c]
        probs = city["population"] / city["population"].sum()
        home, code, k = _home_place(rng, city["geom"], np.arange(n_cells), probs, city["station_places"])
        wx, wy = _random_point(rng, city["geom"], avoid=city["station_places"], margin=300.0)
        plans.append(AgentPlan(
            device_id=f"dev{spec.n_officers + i:05d}", kind="civilian", city=c, home=home,
            home_cell=code, home_bg=k, work=Place(wx, wy),
            visits_station=bool(rng.random() < spec.civilian_station_visitor_share)))
    # device ids are shuffled so officer status cannot be read off the id
    order = rng.permutation(len(plans))
    for new, p in zip(order, plans):
        p.device_id = f"dev{new:05d}"
    return plans


def _agent_job(item, spec, cities, weights):
    plan, seed = item
    return _simulate_agent(plan, seed, spec, cities, weights[plan.city])


def generate(spec: SynthSpec, n_jobs=None) -> SynthCorpus:
    """Build a labelled synthetic corpus; identical output for a given seed."""
    spec.validate()
    root = np.random.SeedSequence(spec.rng_seed)
    city_seq, plan_seq, agent_seq, table_seq = root.spawn(4)
    city_rngs = [np.random.default_rng(s) for s in city_seq.spawn(spec.n_cities)]
    cities = [_build_city(c, spec, city_rngs[c]) for c in range(spec.n_cities)]
    weights = [_patrol_weights(cities[c], spec, city_rngs[c], c) for c in range(spec.n_cities)]
    plans = _plan_agents(spec, cities, np.random.default_rng(plan_seq))
    seeds = agent_seq.spawn(len(plans))
    results = ordered_map(partial(_agent_job, spec=spec, cities=cities, weights=weights),
                          list(zip(plans, seeds)), n_jobs)

    frames = [r[0] for r in results]
    pings = pd.concat(frames, ignore_index=True) if frames else \
        pd.DataFrame(columns=["device_id", "ts", "lat", "lon"])
    pings = pings.sort_values(["device_id", "ts"], kind="mergesort").reset_index(drop=True)
    pings = pings.drop_duplicates(["device_id", "ts", "lat", "lon"]).reset_index(drop=True)

    n_cells = spec.grid_rows * spec.grid_cols
    realized = np.zeros((spec.n_cities, n_cells))
    planned = np.zeros(spec.n_cities)
    truth_shifts = []
    for plan, (_, shifts, patrol_time, planned_patrol) in zip(plans, results):
        realized[plan.city] += patrol_time
        planned[plan.city] += planned_patrol
        truth_shifts.extend(shifts)

    blockgroups = [bg for city in cities for bg in city["blockgroups"]]
    stations = [s for city in cities for s in city["stations"]]
    bg_rows = []
    for c, city in enumerate(cities):
        w = weights[c]
        expected = planned[c] * w / w.sum() / HOUR
        for k in range(n_cells):
            bg_rows.append({"bg_id": city["geom"].bg_id(k), "city_id": city["geom"].city_id,
                            "weight": float(w[k]), "expected_hours": float(expected[k]),
                            "realized_hours": float(realized[c, k] / HOUR)})
    bg_hours = pd.DataFrame(bg_rows)

    officers = [p for p in plans if p.kind == "officer"]
    dept_black = {}
    for c, city in enumerate(cities):
        members = [p for p in officers if p.city == c]
        if members:
            dept_black[city["geom"].city_id] = float(np.mean([city["shares"][p.home_bg, 1] for p in members]))
    truth = GroundTruth(
        officer_ids=sorted(p.device_id for p in officers),
        home_cells={p.device_id: p.home_cell for p in officers},
        home_bg={p.device_id: cities[p.city]["geom"].bg_id(p.home_bg) for p in officers},
        officer_city={p.device_id: cities[p.city]["geom"].city_id for p in officers},
        shifts=pd.DataFrame(sorted(truth_shifts),
                            columns=SHIFT_COLUMNS),
        bg_hours=bg_hours,
        department_pct_black=dept_black,
    )
    tables = _external_tables(spec, cities, plans, bg_hours, np.random.default_rng(table_seq))
    return SynthCorpus(spec=spec, window=spec.window, pings=pings, stations=stations,
                       blockgroups=blockgroups, truth=truth, **tables)


def _external_tables(spec, cities, plans, bg_hours, rng):
    city_rows, dept_rows, emp_rows = [], [], []
    for c, city in enumerate(cities):
        cid = city["geom"].city_id
        sh = city["city_shares"]
        city_rows.append({"city_id": cid, "population": float(city["population"].sum()),
                          "pct_white": sh[0], "pct_black": sh[1], "pct_hispanic": sh[2],
                          "pct_asian": sh[3]})
        members = [p for p in plans if p.kind == "officer" and p.city == c]
        comp = (np.mean([city["shares"][p.home_bg] for p in members], axis=0)
                if members else sh)
        police_black = float(comp[1])
        dept_rows.append({"city_id": cid,
                          "police_pct_black": police_black,
                          "supervisor_pct_black": police_black * rng.uniform(0.5, 1.0),
                          "pct_white": float(comp[0]), "pct_black": police_black,
                          "pct_hispanic": float(comp[2]), "pct_asian": float(comp[3])})
        emp_rows.append({"city_id": cid, "employees": int(round(
            len(members) / spec.employee_capture_rate * rng.uniform(0.95, 1.05)))})

    zips, residents, arrests, stops = [], {}, [], []
    for c, city in enumerate(cities):
        geom = city["geom"]
        for k in range(geom.rows * geom.cols):
            r, col = divmod(k, geom.cols)
            zips.append({"bg_id": geom.bg_id(k), "zip": f"{geom.city_id}-Z{r // 3:02d}{col // 3:02d}"})
    zip_of = {z["bg_id"]: z["zip"] for z in zips}
    for p in plans:
        if p.kind == "officer":
            z = zip_of[cities[p.city]["geom"].bg_id(p.home_bg)]
            residents[z] = residents.get(z, 0) + 1
    zip_rows = [{"zip": z, "officers": int(n + rng.poisson(0.3))} for z, n in sorted(residents.items())]
    for row in bg_hours.itertuples(index=False):
        arrests.append({"bg_id": row.bg_id, "count": int(rng.poisson(0.4 * row.expected_hours + 0.5))})
        stops.append({"bg_id": row.bg_id, "count": int(rng.poisson(0.8 * row.expected_hours + 1.0))})
    return {
        "city_table": pd.DataFrame(city_rows),
        "department_table": pd.DataFrame(dept_rows),
        "employee_counts": pd.DataFrame(emp_rows),
        "zip_crosswalk": pd.DataFrame(zips),
        "zip_residents": pd.DataFrame(zip_rows, columns=["zip", "officers"]),
        "arrests": pd.DataFrame(arrests),
        "stops": pd.DataFrame(stops),
    }


# ----------------------------------------------------------------------------
# scoring
# ----------------------------------------------------------------------------

def interval_iou(a0, a1, b0, b1) -> float:
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union if union > 0 else 0.0


def score(detected: dict, truth: GroundTruth) -> dict:
    """Compare pipeline output with the planted truth.

    ``detected`` may carry ``officer_ids`` (iterable), ``shifts`` (frame or
    list of Shift with device_id/start_ts/end_ts), ``presence`` (frame with
    bg_id/hours) and ``homes`` (frame with device_id/half/home_cell).
    Missing entries yield missing metrics.
    """
    out = {}
    true_ids = set(truth.officer_ids)
    if "officer_ids" in detected:
        found = set(detected["officer_ids"])
        tp = len(found & true_ids)
        out["officer_precision"] = tp / len(found) if found else (1.0 if not true_ids else 0.0)
        out["officer_recall"] = tp / len(true_ids) if true_ids else 1.0
        out["n_detected_officers"] = len(found)
        out["n_true_officers"] = len(true_ids)
    if "shifts" in detected:
        shifts = detected["shifts"]
        if not isinstance(shifts, pd.DataFrame):
            shifts = pd.DataFrame([(s.device_id, s.start_ts, s.end_ts) for s in shifts],
                                  columns=["device_id", "start_ts", "end_ts"])
        by_dev = {k: g for k, g in truth.shifts.groupby("device_id")}
        ious = []
        matched_truth = set()
        for r in shifts.itertuples(index=False):
            g = by_dev.get(r.device_id)
            if g is None:
                continue
            best, best_i = 0.0, None
            for i, t in zip(g.index, g.itertuples(index=False)):
                v = interval_iou(r.start_ts, r.end_ts, t.start_ts, t.end_ts)
                if v > best:
                    best, best_i = v, i
            if best_i is not None:
                ious.append(best)
                matched_truth.add(best_i)
        out["n_detected_shifts"] = len(shifts)
        out["n_matched_shifts"] = len(ious)
        out["shift_iou_mean"] = float(np.mean(ious)) if ious else float("nan")
        observable = set(truth.shifts.index[truth.shifts["observable"].astype(bool)])
        out["shift_recall"] = (len(matched_truth & observable) / len(observable)
                               if observable else 1.0)
        out["shift_precision"] = len(ious) / len(shifts) if len(shifts) else 1.0
    if "presence" in detected:
        p = detected["presence"].set_index("bg_id")["hours"]
        t = truth.bg_hours.set_index("bg_id")
        joined = t.join(p.rename("detected"), how="left").fillna({"detected": 0.0})
        out["bg_hours_rho_expected"] = pearson(joined["detected"], joined["expected_hours"])
        out["bg_hours_rho_realized"] = pearson(joined["detected"], joined["realized_hours"])
    if "homes" in detected:
        h = detected["homes"]
        h1 = h[h["half"] == "H1"].set_index("device_id")["home_cell"]
        hits = [h1.get(d) == truth.home_cells[d] for d in truth.officer_ids]
        out["home_hit_rate"] = float(np.mean(hits)) if hits else float("nan")
    return out


def load_truth(path) -> GroundTruth:
    with open(path) as fh:
        return GroundTruth.from_json(json.load(fh))

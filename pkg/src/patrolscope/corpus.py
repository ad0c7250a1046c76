"""Reading, validating and writing the input corpora.

Pings are CSV or JSON-lines (``device_id, ts_unix_s, lat, lon``); station
footprints and block-group geometry are GeoJSON; block-group attributes and
every auxiliary table are CSV keyed by an id column.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterator
from zoneinfo import ZoneInfo

import numpy as np
import pandas as pd

from .geo import ConvexPolygon, GeoPoint, PolygonIndex, convex_hull

logger = logging.getLogger(__name__)

PING_FIELDS = ("device_id", "ts_unix_s", "lat", "lon")

COVARIATES = (
    "population",
    "pct_white",
    "pct_black",
    "pct_hispanic",
    "pct_asian",
    "pct_college",
    "median_income_k",
    "census_return_rate",
    "homicide_count",
    "dist_nearest_homicide_km",
)
RACE_GROUPS = ("white", "black", "hispanic", "asian")


class CorpusError(ValueError):
    """Raised when an input file cannot be turned into a valid corpus."""


def is_share_column(name: str) -> bool:
    return name.startswith("pct_") or name == "census_return_rate"


# ----------------------------------------------------------------------------
# domain types
# ----------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Ping:
    device_id: str
    timestamp: float
    location: GeoPoint

    def __post_init__(self):
        if not self.device_id:
            raise ValueError("device_id must be non-empty")


@dataclass(frozen=True)
class Station:
    station_id: str
    city_id: str
    footprint: ConvexPolygon


@dataclass
class BlockGroup:
    bg_id: str
    city_id: str
    ring: np.ndarray  # (n, 2) lon/lat, open ring
    attributes: dict[str, float] = field(default_factory=dict)

    def covariate(self, name: str) -> float:
        return self.attributes.get(name, math.nan)

    def missing(self) -> list[str]:
        return [c for c in COVARIATES if not math.isfinite(self.covariate(c))]

    def race_shares(self) -> np.ndarray:
        return np.array([self.covariate(f"pct_{g}") for g in RACE_GROUPS])


@dataclass(frozen=True)
class StudyWindow:
    """Half-open UTC date range [start, end) with per-city timezones."""

    start: date
    end: date
    timezone_by_city: dict = field(default_factory=dict)
    default_timezone: str = "UTC"

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError("study window end must be after start")

    @classmethod
    def from_dict(cls, d: dict) -> "StudyWindow":
        return cls(
            start=date.fromisoformat(d["start"]),
            end=date.fromisoformat(d["end"]),
            timezone_by_city=dict(d.get("timezone_by_city", {})),
            default_timezone=d.get("default_timezone", "UTC"),
        )

    def to_dict(self) -> dict:
        return {
            "start": self.start.isoformat(),
            "end": self.end.isoformat(),
            "timezone_by_city": dict(sorted(self.timezone_by_city.items())),
            "default_timezone": self.default_timezone,
        }

    @property
    def start_ts(self) -> int:
        return int(datetime(self.start.year, self.start.month, self.start.day,
                            tzinfo=timezone.utc).timestamp())

    @property
    def end_ts(self) -> int:
        return int(datetime(self.end.year, self.end.month, self.end.day,
                            tzinfo=timezone.utc).timestamp())

    @property
    def months(self) -> list[str]:
        """Calendar months ("YYYY-MM") intersecting the window, in order."""
        out = []
        y, m = self.start.year, self.start.month
        last = self.end - timedelta(days=1)
        while (y, m) <= (last.year, last.month):
            out.append(f"{y:04d}-{m:02d}")
            y, m = (y + 1, 1) if m == 12 else (y, m + 1)
        return out

    def halves(self) -> tuple[list[str], list[str]]:
        """Early and late months; with an odd count the early half is longer."""
        months = self.months
        k = (len(months) + 1) // 2
        return months[:k], months[k:]

    def tz(self, city_id) -> ZoneInfo:
        return ZoneInfo(self.timezone_by_city.get(city_id, self.default_timezone))


def local_calendar(ts, tz: ZoneInfo) -> pd.DataFrame:
    """Local date, month key, weekday and hour for UTC second timestamps."""
    local = pd.to_datetime(np.asarray(ts, dtype=float), unit="s", utc=True).tz_convert(tz)
    return pd.DataFrame({
        "day": local.strftime("%Y-%m-%d"),
        "month": local.strftime("%Y-%m"),
        "weekday": local.weekday,
        "hour": local.hour,
    })


# ----------------------------------------------------------------------------
# pings
# ----------------------------------------------------------------------------

@dataclass
class LoadReport:
    n_rows: int = 0
    n_kept: int = 0
    n_duplicates: int = 0
    n_out_of_window: int = 0
    rejects: list[tuple[int, str]] = field(default_factory=list)

    @property
    def reject_rate(self) -> float:
        return len(self.rejects) / self.n_rows if self.n_rows else 0.0

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_kept": self.n_kept,
            "n_duplicates": self.n_duplicates,
            "n_out_of_window": self.n_out_of_window,
            "n_rejects": len(self.rejects),
        }

    def write_rejects(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["line_no", "reason"])
            w.writerows(sorted(self.rejects))


def _iter_ping_records(path: Path) -> Iterator[tuple[int, dict | None, str]]:
    if path.suffix.lower() in (".jsonl", ".ndjson", ".json"):
        with open(path) as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    yield line_no, None, "malformed json"
                    continue
                if not isinstance(rec, dict):
                    yield line_no, None, "malformed json"
                    continue
                yield line_no, rec, ""
    else:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = None
            for row in reader:
                line_no = reader.line_num
                if not row or row[0].startswith("#"):
                    continue
                if header is None:
                    header = [h.strip() for h in row]
                    missing = [f for f in PING_FIELDS if f not in header]
                    if missing:
                        raise CorpusError(f"{path}: missing columns {missing}")
                    continue
                if len(row) != len(header):
                    yield line_no, None, "wrong field count"
                    continue
                yield line_no, dict(zip(header, row)), ""


def _parse_ping(rec: dict) -> tuple[tuple | None, str]:
    for f in PING_FIELDS:
        if rec.get(f) in (None, ""):
            return None, f"missing {f}"
    device = str(rec["device_id"]).strip()
    if not device:
        return None, "empty device_id"
    try:
        ts = float(rec["ts_unix_s"])
        lat = float(rec["lat"])
        lon = float(rec["lon"])
    except (TypeError, ValueError):
        return None, "unparseable number"
    if not (math.isfinite(ts) and math.isfinite(lat) and math.isfinite(lon)):
        return None, "non-finite value"
    if not -90.0 <= lat <= 90.0:
        return None, "lat out of range"
    if not -180.0 <= lon < 180.0:
        return None, "lon out of range"
    return (device, ts, lat, lon), ""


def load_pings(path, window: StudyWindow, max_reject_rate: float = 0.01):
    """Read a ping file into a canonical frame sorted by (device_id, ts).

    Returns ``(frame, report)``. Exact duplicate rows are dropped and rows
    outside the study window are discarded; both are counted in the report.
    Malformed rows are listed in ``report.rejects`` with their line number.
    More than ``max_reject_rate`` malformed rows raises :class:`CorpusError`.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"ping file not found: {path}")
    report = LoadReport()
    rows = []
    lines = []
    for line_no, rec, reason in _iter_ping_records(path):
        report.n_rows += 1
        if rec is None:
            report.rejects.append((line_no, reason))
            continue
        parsed, reason = _parse_ping(rec)
        if parsed is None:
            report.rejects.append((line_no, reason))
            continue
        rows.append(parsed)
        lines.append(line_no)

    if max_reject_rate is not None and report.reject_rate > max_reject_rate:
        raise CorpusError(
            f"{path}: {len(report.rejects)} of {report.n_rows} rows rejected "
            f"(> {max_reject_rate:.1%})")

    frame = pd.DataFrame(rows, columns=["device_id", "ts", "lat", "lon"])
    frame["line_no"] = np.asarray(lines, dtype=np.int64)
    frame = frame.astype({"device_id": str, "ts": float, "lat": float, "lon": float})

    dup = frame.duplicated(subset=["device_id", "ts", "lat", "lon"], keep="first")
    for line_no in frame.loc[dup, "line_no"]:
        report.rejects.append((int(line_no), "duplicate"))
    report.n_duplicates = int(dup.sum())
    frame = frame[~dup]

    in_window = (frame["ts"] >= window.start_ts) & (frame["ts"] < window.end_ts)
    report.n_out_of_window = int((~in_window).sum())
    frame = frame[in_window]

    frame = canonicalize_pings(frame.drop(columns="line_no"))
    report.n_kept = len(frame)
    return frame, report


def canonicalize_pings(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame[["device_id", "ts", "lat", "lon"]]
    frame = frame.sort_values(["device_id", "ts", "lat", "lon"], kind="mergesort")
    return frame.reset_index(drop=True)


def iter_streams(pings: pd.DataFrame) -> Iterator[tuple[str, pd.DataFrame]]:
    """Per-device time-sorted streams from a canonical ping frame."""
    for device_id, stream in pings.groupby("device_id", sort=True):
        yield device_id, stream.reset_index(drop=True)


def write_pings(frame: pd.DataFrame, path) -> None:
    out = frame[["device_id", "ts", "lat", "lon"]].rename(columns={"ts": "ts_unix_s"})
    ts = out["ts_unix_s"]
    if np.all(np.mod(ts, 1) == 0):
        out = out.assign(ts_unix_s=ts.astype(np.int64))
    out.to_csv(path, index=False, float_format="%.7f")


# ----------------------------------------------------------------------------
# stations
# ----------------------------------------------------------------------------

def _outer_rings(geometry: dict) -> list[list]:
    kind = geometry.get("type")
    if kind == "Polygon":
        return [geometry["coordinates"][0]]
    if kind == "MultiPolygon":
        return [poly[0] for poly in geometry["coordinates"]]
    raise CorpusError(f"unsupported geometry type {kind!r}")


def _read_features(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"geometry file not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise CorpusError(f"{path}: expected a GeoJSON FeatureCollection")
    return doc["features"]


def load_geofences(path) -> list[Station]:
    """Station footprints; non-convex rings are replaced by their convex hull."""
    stations = []
    seen = set()
    for i, feat in enumerate(_read_features(path)):
        props = feat.get("properties") or {}
        sid = str(props.get("station_id", ""))
        city = str(props.get("city_id", ""))
        if not sid or not city:
            raise CorpusError(f"feature {i}: station_id and city_id are required")
        if sid in seen:
            raise CorpusError(f"duplicate station_id {sid!r}")
        seen.add(sid)
        coords = [tuple(map(float, c[:2])) for ring in _outer_rings(feat["geometry"]) for c in ring]
        distinct = list(dict.fromkeys(coords))
        if len(distinct) < 3:
            raise CorpusError(f"station {sid!r}: fewer than 3 distinct vertices")
        try:
            footprint = ConvexPolygon.from_lonlat(distinct)
        except ValueError:
            hull = convex_hull(distinct)
            if len(hull) < 3:
                raise CorpusError(f"station {sid!r}: degenerate footprint") from None
            logger.warning("station %s: footprint not convex, using convex hull "
                           "(%d -> %d vertices)", sid, len(distinct), len(hull))
            footprint = ConvexPolygon.from_lonlat(hull)
        stations.append(Station(sid, city, footprint))
    return sorted(stations, key=lambda s: s.station_id)


def write_geofences(stations: list[Station], path) -> None:
    features = []
    for s in stations:
        ring = [list(map(float, v)) for v in s.footprint.lonlat()]
        features.append({
            "type": "Feature",
            "properties": {"station_id": s.station_id, "city_id": s.city_id},
            "geometry": {"type": "Polygon", "coordinates": [ring + [ring[0]]]},
        })
    _write_geojson(features, path)


def _write_geojson(features, path) -> None:
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh,
                  indent=1, sort_keys=True)
        fh.write("\n")


class StationIndex:
    """Vectorized "which station footprint is this ping in" lookups."""

    def __init__(self, stations: list[Station]):
        self.stations = list(stations)
        self.station_ids = np.array([s.station_id for s in self.stations], dtype=object)
        self.city_ids = np.array([s.city_id for s in self.stations], dtype=object)
        self._index = PolygonIndex([s.footprint.lonlat() for s in self.stations], convex=True)

    def locate(self, lon, lat) -> np.ndarray:
        return self._index.locate(lon, lat)


# ----------------------------------------------------------------------------
# block groups
# ----------------------------------------------------------------------------

@dataclass
class BlockGroupReport:
    n_geometries: int = 0
    n_complete: int = 0
    unmatched_attribute_rows: list[str] = field(default_factory=list)
    without_attributes: list[str] = field(default_factory=list)
    invalid_values: list[tuple[str, str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_geometries": self.n_geometries,
            "n_complete": self.n_complete,
            "n_unmatched_attribute_rows": len(self.unmatched_attribute_rows),
            "n_without_attributes": len(self.without_attributes),
            "n_invalid_values": len(self.invalid_values),
        }


def _validate_attribute(name: str, value) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        return math.nan
    if not math.isfinite(v):
        return math.nan
    if is_share_column(name) and not 0.0 <= v <= 1.0:
        raise ValueError(f"{name}={v} outside [0, 1]")
    if name in ("population", "homicide_count", "dist_nearest_homicide_km") and v < 0:
        raise ValueError(f"{name}={v} negative")
    return v


def load_blockgroups(geom_path, attr_path=None):
    """Join block-group geometry to its attribute table on ``bg_id``.

    Returns ``(blockgroups, report)``. Invalid attribute values (a share
    outside [0, 1], a negative count) are flagged missing rather than
    rejecting the block group.
    """
    report = BlockGroupReport()
    geoms = {}
    for i, feat in enumerate(_read_features(geom_path)):
        props = feat.get("properties") or {}
        bg_id = str(props.get("bg_id", ""))
        if not bg_id:
            raise CorpusError(f"feature {i}: bg_id is required")
        if bg_id in geoms:
            raise CorpusError(f"duplicate bg_id {bg_id!r}")
        rings = _outer_rings(feat["geometry"])
        ring = np.array([c[:2] for c in rings[0]], dtype=float)
        if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        if len(np.unique(ring, axis=0)) < 3:
            raise CorpusError(f"block group {bg_id!r}: fewer than 3 distinct vertices")
        geoms[bg_id] = (str(props.get("city_id", "")), ring)
    report.n_geometries = len(geoms)

    attrs: dict[str, dict[str, float]] = {}
    if attr_path is not None:
        table = read_csv_skipping_header_comments(attr_path, dtype={"bg_id": str})
        if "bg_id" not in table.columns:
            raise CorpusError(f"{attr_path}: missing bg_id column")
        value_cols = [c for c in table.columns if c not in ("bg_id", "city_id")]
        for rec in table.to_dict("records"):
            bg_id = str(rec["bg_id"])
            if bg_id not in geoms:
                logger.warning("attribute row for unknown block group %s ignored", bg_id)
                report.unmatched_attribute_rows.append(bg_id)
                continue
            values = {}
            for c in value_cols:
                try:
                    values[c] = _validate_attribute(c, rec[c])
                except ValueError as exc:
                    logger.warning("block group %s: %s; flagged missing", bg_id, exc)
                    report.invalid_values.append((bg_id, c, float(rec[c])))
                    values[c] = math.nan
            attrs[bg_id] = values

    out = []
    for bg_id in sorted(geoms):
        city, ring = geoms[bg_id]
        if bg_id not in attrs:
            report.without_attributes.append(bg_id)
        bg = BlockGroup(bg_id, city, ring, attrs.get(bg_id, {}))
        if not bg.missing():
            report.n_complete += 1
        out.append(bg)
    if report.without_attributes:
        logger.warning("%d block groups have no attribute row", len(report.without_attributes))
    return out, report


def write_blockgroups(blockgroups: list[BlockGroup], geom_path, attr_path) -> None:
    features = []
    for bg in blockgroups:
        ring = [list(map(float, v)) for v in bg.ring]
        features.append({
            "type": "Feature",
            "properties": {"bg_id": bg.bg_id, "city_id": bg.city_id},
            "geometry": {"type": "Polygon", "coordinates": [ring + [ring[0]]]},
        })
    _write_geojson(features, geom_path)
    blockgroups_frame(blockgroups).to_csv(attr_path, index=False)


def blockgroups_frame(blockgroups: list[BlockGroup]) -> pd.DataFrame:
    """One row per block group with every attribute as a column."""
    rows = []
    extra = sorted({k for bg in blockgroups for k in bg.attributes} - set(COVARIATES))
    for bg in blockgroups:
        row = {"bg_id": bg.bg_id, "city_id": bg.city_id}
        for c in (*COVARIATES, *extra):
            row[c] = bg.covariate(c)
        rows.append(row)
    return pd.DataFrame(rows, columns=["bg_id", "city_id", *COVARIATES, *extra])


class BlockGroupIndex:
    def __init__(self, blockgroups: list[BlockGroup]):
        self.blockgroups = list(blockgroups)
        self.bg_ids = np.array([bg.bg_id for bg in self.blockgroups], dtype=object)
        self._index = PolygonIndex([bg.ring for bg in self.blockgroups])

    def locate(self, lon, lat) -> np.ndarray:
        return self._index.locate(lon, lat)


# ----------------------------------------------------------------------------
# auxiliary tables and manifest
# ----------------------------------------------------------------------------

def read_csv_skipping_header_comments(path, **kwargs) -> pd.DataFrame:
    """``pd.read_csv`` after skipping leading ``#`` lines (and only those)."""
    skip = 0
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            skip += 1
    return pd.read_csv(path, skiprows=skip, **kwargs)


def load_table(path, key: str | None = None) -> pd.DataFrame:
    """Generic CSV attribute table; ``key`` columns are read as strings."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"table not found: {path}")
    dtype = {c: str for c in ("bg_id", "city_id", "zip", "device_id", "station_id")}
    table = read_csv_skipping_header_comments(path, dtype=dtype)
    if key is not None and key not in table.columns:
        raise CorpusError(f"{path}: missing key column {key!r}")
    return table


MANIFEST_KEYS = (
    "pings",
    "geofences",
    "blockgroups_geometry",
    "blockgroups_attributes",
    "city_table",
    "department_table",
    "employee_counts",
    "zip_crosswalk",
    "zip_residents",
    "arrests",
    "stops",
)


def load_manifest(path) -> dict[str, Path]:
    """Input manifest: JSON mapping of the keys above to paths.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    unknown = set(doc) - set(MANIFEST_KEYS)
    if unknown:
        raise CorpusError(f"{path}: unknown manifest keys {sorted(unknown)}")
    return {k: (path.parent / v).resolve() if not Path(v).is_absolute() else Path(v)
            for k, v in doc.items() if v is not None}

"""Officer-hours per block group from patrol pings.

Every patrol ping is credited half the time to its previous ping plus half
the time to its next ping (endpoints get the single half-gap they have), so
a shift's dwell sums to the span of its patrol pings. Pings implying a
speed above the cap, or falling in excluded hours, keep their neighbors'
dwell unchanged but contribute none of their own.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._parallel import ordered_map
from .corpus import BlockGroupIndex, StudyWindow, local_calendar
from .geo import METERS_PER_MILE, haversine_arrays
from .shifts import HOUR, Shift

SPEED_CAP_MPH = 50.0
SPEED_CAP_STRICT_MPH = 25.0
N_SHIFT_HOURS = 12


@dataclass(frozen=True)
class PresenceConfig:
    speed_cap_mph: float | None = SPEED_CAP_MPH
    exclude_weekday_9to5: bool = False
    local_time: bool = True
    speed_reference: str = "retained"  # or "raw"

    def __post_init__(self):
        if self.speed_cap_mph is not None and not self.speed_cap_mph > 0:
            raise ValueError("speed_cap_mph must be positive (or None to disable)")
        if self.speed_reference not in ("retained", "raw"):
            raise ValueError("speed_reference must be 'retained' or 'raw'")


@dataclass
class PresenceReport:
    n_shifts: int = 0
    n_pings: int = 0
    n_speed_excluded: int = 0
    n_time_excluded: int = 0
    n_unassigned: int = 0
    unfiltered_seconds: float = 0.0
    filtered_seconds: float = 0.0
    assigned_seconds: float = 0.0
    unassigned_seconds: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def unassigned_hours(self) -> float:
        return self.unassigned_seconds / HOUR

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unassigned_hours"] = self.unassigned_hours
        return d


def assign_dwell(ts) -> np.ndarray:
    """Half-gap dwell per ping, in the units of ``ts``.

    Accepts a sorted timestamp array or a :class:`Shift`.
    """
    if isinstance(ts, Shift):
        ts = ts.patrol_ts
    ts = np.asarray(ts, dtype=float)
    n = ts.size
    if n <= 1:
        return np.zeros(n)
    gaps = np.diff(ts)
    if np.any(gaps < 0):
        raise ValueError("timestamps must be sorted")
    dwell = np.empty(n)
    dwell[0] = gaps[0] / 2
    dwell[-1] = gaps[-1] / 2
    dwell[1:-1] = (ts[2:] - ts[:-2]) / 2
    return dwell


def speed_filter(ts, lat, lon, cap_mph: float | None, reference: str = "retained") -> np.ndarray:
    """Mask of pings kept by the speed cap. The first ping is always kept."""
    n = len(ts)
    keep = np.ones(n, dtype=bool)
    if cap_mph is None or n < 2:
        return keep
    if reference == "raw":
        keep[1:] = _speeds(ts[:-1], lat[:-1], lon[:-1], ts[1:], lat[1:], lon[1:]) <= cap_mph
        return keep
    prev = 0
    for k in range(1, n):
        v = _speeds(ts[prev], lat[prev], lon[prev], ts[k], lat[k], lon[k])
        if v > cap_mph:
            keep[k] = False
        else:
            prev = k
    return keep


def _speeds(t1, lat1, lon1, t2, lat2, lon2):
    meters = haversine_arrays(lat1, lon1, lat2, lon2)
    dt = np.asarray(t2, dtype=float) - np.asarray(t1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(dt > 0, meters / np.where(dt > 0, dt, 1.0) * HOUR / METERS_PER_MILE,
                     np.where(meters > 0, np.inf, 0.0))
    return v


def shift_hour_index(ts, start_ts: float) -> np.ndarray:
    """1-based hour of the shift clock; the last bucket collects hours 12+."""
    idx = np.ceil((np.asarray(ts, dtype=float) - start_ts) / HOUR).astype(np.int64)
    return np.clip(idx, 1, N_SHIFT_HOURS)


def _shift_parts(shift: Shift, index: BlockGroupIndex, cfg: PresenceConfig, tz):
    ts, lat, lon = shift.patrol_ts, shift.patrol_lat, shift.patrol_lon
    dwell = assign_dwell(ts)
    keep_speed = speed_filter(ts, lat, lon, cfg.speed_cap_mph, cfg.speed_reference)
    keep = keep_speed.copy()
    n_time = 0
    if cfg.exclude_weekday_9to5 and len(ts):
        cal = local_calendar(ts, tz)
        working = (cal["weekday"].to_numpy() < 5) & (cal["hour"].to_numpy() >= 9) \
            & (cal["hour"].to_numpy() < 17)
        n_time = int((working & keep_speed).sum())
        keep &= ~working
    bg = index.locate(lon[keep], lat[keep])
    return {
        "bg": bg,
        "hour": shift_hour_index(ts[keep], shift.start_ts),
        "dwell": dwell[keep],
        "n": len(ts),
        "n_speed": int((~keep_speed).sum()),
        "n_time": n_time,
        "unfiltered": math.fsum(dwell),
    }


def aggregate_presence(shifts: list[Shift], blockgroups, cfg: PresenceConfig | None = None,
                       window: StudyWindow | None = None, n_jobs=None):
    """Sum filtered dwell into block groups.

    Returns ``(cells, report)`` where ``cells`` has one row per block group
    (zero-presence block groups included) with columns bg_id, city_id,
    hours, shift_count and hour_01..hour_12.
    """
    cfg = cfg or PresenceConfig()
    index = blockgroups if isinstance(blockgroups, BlockGroupIndex) else BlockGroupIndex(blockgroups)
    items = [(s, _tz_for(s, window, cfg)) for s in shifts]
    parts = ordered_map(partial(_parts_item, index=index, cfg=cfg), items, n_jobs)

    report = PresenceReport(n_shifts=len(shifts), config=asdict(cfg))
    n_bg = len(index.blockgroups)
    per_bg: list[list[np.ndarray]] = [[] for _ in range(n_bg)]
    per_bg_hour: dict[tuple[int, int], list[np.ndarray]] = {}
    shift_count = np.zeros(n_bg, dtype=np.int64)
    unassigned = []
    unfiltered = []
    for p in parts:
        report.n_pings += p["n"]
        report.n_speed_excluded += p["n_speed"]
        report.n_time_excluded += p["n_time"]
        unfiltered.append(p["unfiltered"])
        bg, hour, dwell = p["bg"], p["hour"], p["dwell"]
        out = bg < 0
        report.n_unassigned += int(out.sum())
        unassigned.append(dwell[out])
        for k in np.unique(bg[~out]):
            sel = bg == k
            per_bg[k].append(dwell[sel])
            shift_count[k] += 1
            for h in np.unique(hour[sel]):
                per_bg_hour.setdefault((int(k), int(h)), []).append(dwell[sel & (hour == h)])

    seconds = np.array([math.fsum(np.concatenate(v)) if v else 0.0 for v in per_bg])
    report.unfiltered_seconds = math.fsum(unfiltered)
    report.assigned_seconds = math.fsum(seconds)
    report.unassigned_seconds = math.fsum(np.concatenate(unassigned)) if unassigned else 0.0
    report.filtered_seconds = math.fsum([report.assigned_seconds, report.unassigned_seconds])

    cells = pd.DataFrame({
        "bg_id": [bg.bg_id for bg in index.blockgroups],
        "city_id": [bg.city_id for bg in index.blockgroups],
        "hours": seconds / HOUR,
        "shift_count": shift_count,
    })
    for h in range(1, N_SHIFT_HOURS + 1):
        col = np.zeros(n_bg)
        for k in range(n_bg):
            v = per_bg_hour.get((k, h))
            if v:
                col[k] = math.fsum(np.concatenate(v)) / HOUR
        cells[f"hour_{h:02d}"] = col
    cells.insert(3, "arsinh_hours", np.arcsinh(cells["hours"].to_numpy()))
    return cells.sort_values("bg_id", kind="mergesort").reset_index(drop=True), report


def _parts_item(item, index, cfg):
    shift, tz = item
    return _shift_parts(shift, index, cfg, tz)


def _tz_for(shift: Shift, window: StudyWindow | None, cfg: PresenceConfig):
    if window is None:
        return "UTC"
    if not cfg.local_time:
        return window.tz(None)
    return window.tz(shift.city_id)


def presence_vector(cells: pd.DataFrame, transform: str = "none") -> pd.Series:
    """Outcome per block group; zero-presence block groups stay in as 0."""
    hours = cells.set_index("bg_id")["hours"].astype(float)
    if transform == "none":
        return hours
    if transform == "arsinh":
        return np.arcsinh(hours)
    raise ValueError(f"unknown transform {transform!r}")


class PresenceAggregator(TransformerMixin, BaseEstimator):
    """Block-group presence table from a list of shifts.

    Parameters mirror :class:`PresenceConfig`; ``blockgroups`` is the list
    of block groups the hours are attributed to.
    """

    def __init__(self, blockgroups=None, window=None, speed_cap_mph=SPEED_CAP_MPH,
                 exclude_weekday_9to5=False, local_time=True, speed_reference="retained",
                 n_jobs=None):
        self.blockgroups = blockgroups
        self.window = window
        self.speed_cap_mph = speed_cap_mph
        self.exclude_weekday_9to5 = exclude_weekday_9to5
        self.local_time = local_time
        self.speed_reference = speed_reference
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        self.config_ = PresenceConfig(self.speed_cap_mph, self.exclude_weekday_9to5,
                                      self.local_time, self.speed_reference)
        self.index_ = BlockGroupIndex(self.blockgroups or [])
        return self

    def transform(self, X) -> pd.DataFrame:
        check_is_fitted(self, "index_")
        cells, self.report_ = aggregate_presence(list(X), self.index_, self.config_,
                                                 self.window, self.n_jobs)
        return cells

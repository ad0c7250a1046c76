"""Input checks shared by the estimators."""

import numpy as np
import pandas as pd

from .corpus import StationIndex
from .geo import encode_geohash_arrays

PING_COLUMNS = ("device_id", "ts", "lat", "lon")


def check_pings(X, annotate_with: StationIndex | None = None) -> pd.DataFrame:
    """Coerce ``X`` into a canonical ping frame.

    Accepts any frame with ``device_id, ts, lat, lon`` columns. Returns a copy
    sorted by device and time. With ``annotate_with`` the ``station`` (index
    into the station list, -1 outside) and ``cell`` (geohash-7) columns are
    added when missing.
    """
    if not isinstance(X, pd.DataFrame):
        raise TypeError(f"expected a pandas DataFrame of pings, got {type(X).__name__}")
    missing = [c for c in PING_COLUMNS if c not in X.columns]
    if missing:
        raise ValueError(f"ping frame is missing columns {missing}")
    extra = [c for c in ("station", "cell") if c in X.columns]
    frame = X[[*PING_COLUMNS, *extra]].copy()
    frame["device_id"] = frame["device_id"].astype(str)
    for c in ("ts", "lat", "lon"):
        frame[c] = frame[c].astype(float)
    if not np.all(np.isfinite(frame[["ts", "lat", "lon"]].to_numpy())):
        raise ValueError("ping frame contains non-finite values")
    dev = frame["device_id"].to_numpy()
    ts = frame["ts"].to_numpy()
    ordered = (dev[:-1] < dev[1:]) | ((dev[:-1] == dev[1:]) & (ts[:-1] <= ts[1:]))
    if not ordered.all():
        frame = frame.sort_values(["device_id", "ts", "lat", "lon"], kind="mergesort")
    frame = frame.reset_index(drop=True)
    if annotate_with is not None:
        annotate_pings(frame, annotate_with)
    return frame


def annotate_pings(frame: pd.DataFrame, stations: StationIndex) -> pd.DataFrame:
    """Add ``station`` and ``cell`` columns in place (skipped if present)."""
    if "station" not in frame.columns:
        frame["station"] = stations.locate(frame["lon"].to_numpy(), frame["lat"].to_numpy())
    if "cell" not in frame.columns:
        frame["cell"] = encode_geohash_arrays(frame["lat"].to_numpy(), frame["lon"].to_numpy())
    return frame


def check_positive(name: str, value) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value

"""Geodesic and planar primitives: geohash cells, great-circle distance,
point-in-polygon tests and ping speeds.

Scalar functions operate on :class:`GeoPoint`; the ``*_arrays`` variants
are vectorized over numpy arrays and are what the pipeline uses on large
ping tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
METERS_PER_MILE = 1609.344

GEOHASH_ALPHABET = "0123456789bcdefghjkmnpqrstuvwxyz"
_GEOHASH_INDEX = {c: i for i, c in enumerate(GEOHASH_ALPHABET)}
GEOHASH_PRECISION = 7


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError("coordinates must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"lat out of range: {self.lat}")
        if not -180.0 <= self.lon < 180.0:
            raise ValueError(f"lon out of range: {self.lon}")


class Geohash7(str):
    """A 7-character geohash code."""

    def __new__(cls, code: str):
        if len(code) != GEOHASH_PRECISION or any(c not in _GEOHASH_INDEX for c in code):
            raise ValueError(f"not a 7-character geohash: {code!r}")
        return super().__new__(cls, code)


@dataclass(frozen=True)
class ConvexPolygon:
    """Counter-clockwise convex ring with no repeated closing vertex."""

    vertices: tuple[GeoPoint, ...]

    def __post_init__(self):
        verts = _drop_repeats(list(self.vertices))
        if len(verts) < 3:
            raise ValueError("a polygon needs at least 3 distinct vertices")
        xy = np.array([(v.lon, v.lat) for v in verts])
        if _signed_area(xy) < 0:
            verts = verts[::-1]
            xy = xy[::-1]
        verts, xy = _drop_collinear(verts, xy)
        if len(verts) < 3:
            raise ValueError("degenerate polygon (all vertices collinear)")
        if not _is_strictly_convex(xy):
            raise ValueError("polygon is not convex")
        object.__setattr__(self, "vertices", tuple(verts))

    @classmethod
    def from_lonlat(cls, coords: Sequence[Sequence[float]]) -> "ConvexPolygon":
        return cls(tuple(GeoPoint(lat=float(y), lon=float(x)) for x, y in coords))

    def lonlat(self) -> np.ndarray:
        return np.array([(v.lon, v.lat) for v in self.vertices], dtype=float)

    def bbox(self) -> tuple[float, float, float, float]:
        xy = self.lonlat()
        return xy[:, 0].min(), xy[:, 1].min(), xy[:, 0].max(), xy[:, 1].max()


def _drop_repeats(verts):
    out = []
    for v in verts:
        if not out or (v.lat, v.lon) != (out[-1].lat, out[-1].lon):
            out.append(v)
    while len(out) > 1 and (out[0].lat, out[0].lon) == (out[-1].lat, out[-1].lon):
        out.pop()
    return out


def _signed_area(xy: np.ndarray) -> float:
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _drop_collinear(verts, xy):
    keep = [i for i in range(len(xy))
            if _cross(xy[i - 1], xy[i], xy[(i + 1) % len(xy)]) != 0.0]
    return [verts[i] for i in keep], xy[keep]


def _is_strictly_convex(xy: np.ndarray) -> bool:
    n = len(xy)
    return all(_cross(xy[i - 1], xy[i], xy[(i + 1) % n]) > 0 for i in range(n))


def convex_hull(coords: Sequence[Sequence[float]]) -> list[tuple[float, float]]:
    """Counter-clockwise hull of (x, y) pairs via the monotone chain."""
    pts = sorted(set((float(x), float(y)) for x, y in coords))
    if len(pts) < 3:
        return pts

    def half(points):
        chain = []
        for p in points:
            while len(chain) >= 2 and _cross(chain[-2], chain[-1], p) <= 0:
                chain.pop()
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(reversed(pts))
    return lower[:-1] + upper[:-1]


# ----------------------------------------------------------------------------
# geohash
# ----------------------------------------------------------------------------

def encode_geohash7(p: GeoPoint) -> Geohash7:
    return Geohash7(encode_geohash(p.lat, p.lon, GEOHASH_PRECISION))


def encode_geohash(lat: float, lon: float, precision: int = GEOHASH_PRECISION) -> str:
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    chars = []
    bits = 0
    n_bits = 0
    even = True
    while len(chars) < precision:
        if even:
            mid = (lon_lo + lon_hi) / 2
            if lon >= mid:
                bits = (bits << 1) | 1
                lon_lo = mid
            else:
                bits <<= 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if lat >= mid:
                bits = (bits << 1) | 1
                lat_lo = mid
            else:
                bits <<= 1
                lat_hi = mid
        even = not even
        n_bits += 1
        if n_bits == 5:
            chars.append(GEOHASH_ALPHABET[bits])
            bits = 0
            n_bits = 0
    return "".join(chars)


def decode_geohash_bbox(code: str) -> tuple[float, float, float, float]:
    """Return (lat_min, lat_max, lon_min, lon_max) of a geohash cell."""
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    even = True
    for c in code:
        value = _GEOHASH_INDEX[c]
        for shift in range(4, -1, -1):
            bit = (value >> shift) & 1
            if even:
                mid = (lon_lo + lon_hi) / 2
                if bit:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2
                if bit:
                    lat_lo = mid
                else:
                    lat_hi = mid
            even = not even
    return lat_lo, lat_hi, lon_lo, lon_hi


def geohash_center(code: str) -> GeoPoint:
    lat_lo, lat_hi, lon_lo, lon_hi = decode_geohash_bbox(code)
    return GeoPoint((lat_lo + lat_hi) / 2, (lon_lo + lon_hi) / 2)


def encode_geohash_arrays(lat, lon, precision: int = GEOHASH_PRECISION) -> np.ndarray:
    """Vectorized geohash encoding; returns an array of python strings."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    n_bits = 5 * precision
    n_lon = (n_bits + 1) // 2
    n_lat = n_bits // 2
    lon_idx = _bisect_index(lon, -180.0, 180.0, n_lon)
    lat_idx = _bisect_index(lat, -90.0, 90.0, n_lat)
    code = np.zeros(lat.shape, dtype=np.int64)
    # interleave: lon bits occupy even positions counted from the most significant bit
    li, ai = n_lon - 1, n_lat - 1
    for pos in range(n_bits):
        if pos % 2 == 0:
            bit = (lon_idx >> li) & 1
            li -= 1
        else:
            bit = (lat_idx >> ai) & 1
            ai -= 1
        code = (code << 1) | bit
    alphabet = np.array(list(GEOHASH_ALPHABET))
    chars = [alphabet[(code >> (5 * (precision - 1 - k))) & 31] for k in range(precision)]
    out = chars[0].astype(object)
    for c in chars[1:]:
        out = out + c.astype(object)
    return out


def _bisect_index(values: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
    # Replays the scalar halving loop so boundary values land in the same cell.
    idx = np.zeros(values.shape, dtype=np.int64)
    lo_arr = np.full(values.shape, lo)
    hi_arr = np.full(values.shape, hi)
    for _ in range(n):
        mid = (lo_arr + hi_arr) / 2
        upper = values >= mid
        idx = (idx << 1) | upper.astype(np.int64)
        lo_arr = np.where(upper, mid, lo_arr)
        hi_arr = np.where(upper, hi_arr, mid)
    return idx


# ----------------------------------------------------------------------------
# distances and speeds
# ----------------------------------------------------------------------------

def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    return float(haversine_arrays(a.lat, a.lon, b.lat, b.lon))


def haversine_arrays(lat1, lon1, lat2, lon2):
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def speed_mph(a, b) -> float:
    """Speed between two pings (anything with ``timestamp`` and ``location``)."""
    dt = b.timestamp - a.timestamp
    if dt <= 0:
        raise ValueError("second ping must be strictly later than the first")
    meters = haversine_m(a.location, b.location)
    return meters / dt * 3600.0 / METERS_PER_MILE


def speed_mph_arrays(lat1, lon1, t1, lat2, lon2, t2):
    dt = np.asarray(t2, dtype=float) - np.asarray(t1, dtype=float)
    if np.any(dt <= 0):
        raise ValueError("timestamps must be strictly increasing")
    return haversine_arrays(lat1, lon1, lat2, lon2) / dt * 3600.0 / METERS_PER_MILE


# ----------------------------------------------------------------------------
# containment
# ----------------------------------------------------------------------------

def contains(poly: ConvexPolygon, p: GeoPoint) -> bool:
    """Inside-or-on-boundary test for a convex polygon (planar lon/lat)."""
    return bool(points_in_convex(poly.lonlat(), np.array([p.lon]), np.array([p.lat]))[0])


def points_in_convex(ring: np.ndarray, x, y) -> np.ndarray:
    """``ring`` is a CCW (n, 2) lon/lat array; boundary counts as inside."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = np.ones(x.shape, dtype=bool)
    nxt = np.roll(ring, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(ring, nxt):
        cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        inside &= cross >= 0
    return inside


def points_in_ring(ring: np.ndarray, x, y) -> np.ndarray:
    """Even-odd ray casting for an arbitrary simple ring; boundary counts as inside."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ring = np.asarray(ring, dtype=float)
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    inside = np.zeros(x.shape, dtype=bool)
    on_edge = np.zeros(x.shape, dtype=bool)
    nxt = np.roll(ring, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(ring, nxt):
        cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        within = ((np.minimum(x0, x1) <= x) & (x <= np.maximum(x0, x1))
                  & (np.minimum(y0, y1) <= y) & (y <= np.maximum(y0, y1)))
        on_edge |= (cross == 0) & within
        straddles = (y0 > y) != (y1 > y)
        if y1 != y0:
            x_cross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            inside ^= straddles & (x < x_cross)
    return inside | on_edge


def ring_bbox(ring: np.ndarray) -> tuple[float, float, float, float]:
    ring = np.asarray(ring, dtype=float)
    return ring[:, 0].min(), ring[:, 1].min(), ring[:, 0].max(), ring[:, 1].max()


def meters_to_degrees(lat: float, dx_m: float, dy_m: float) -> tuple[float, float]:
    """Local east/north offsets in meters to (dlon, dlat) degrees."""
    dlat = dy_m / EARTH_RADIUS_M * 180.0 / math.pi
    dlon = dx_m / (EARTH_RADIUS_M * math.cos(math.radians(lat))) * 180.0 / math.pi
    return dlon, dlat


class PolygonIndex:
    """Locate points among many polygons.

    Points are sorted by longitude once per query so each polygon only tests
    the slice inside its bounding box. A point on a shared boundary goes to
    the polygon that comes first in ``rings``.
    """

    def __init__(self, rings: Sequence[np.ndarray], convex: bool = False):
        self.rings = [np.asarray(r, dtype=float) for r in rings]
        self.convex = convex
        self.bboxes = np.array([ring_bbox(r) for r in self.rings]).reshape(-1, 4)

    def __len__(self):
        return len(self.rings)

    def locate(self, lon, lat) -> np.ndarray:
        """Index of the containing polygon per point, -1 where none contains it."""
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        out = np.full(lon.shape, -1, dtype=np.int64)
        if lon.size == 0 or not self.rings:
            return out
        order = np.argsort(lon, kind="stable")
        xs = lon[order]
        ys = lat[order]
        test = points_in_convex if self.convex else points_in_ring
        for k, (ring, (x0, y0, x1, y1)) in enumerate(zip(self.rings, self.bboxes)):
            lo = np.searchsorted(xs, x0, side="left")
            hi = np.searchsorted(xs, x1, side="right")
            if lo == hi:
                continue
            sel = np.arange(lo, hi)
            sel = sel[(ys[sel] >= y0) & (ys[sel] <= y1)]
            if sel.size == 0:
                continue
            sel = sel[out[order[sel]] < 0]
            if sel.size == 0:
                continue
            hit = test(ring, xs[sel], ys[sel])
            out[order[sel[hit]]] = k
        return out

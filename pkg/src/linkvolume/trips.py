"""Dwell-based trip segmentation and a rule-based vehicle-trip filter."""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .netmodel import GeoPoint, project_arrays

DWELL_RADIUS_M = 50.0
DWELL_TIME_S = 300.0
MIN_TRIP_SPAN_M = 300.0
AIR_SPEED_MPS = 90.0
NONMOTORIZED_SPEED_MPS = 2.5
RAIL_BUFFER_M = 300.0
RAIL_SHARE = 0.8


@dataclass(frozen=True)
class Sighting:
    device_id: str
    t: float
    position: GeoPoint
    accuracy: float | None = None


class ModeLabel(str, Enum):
    DRIVE = "drive"
    NONMOTORIZED = "nonmotorized"
    RAIL = "rail"
    AIR = "air"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Trip:
    device_id: str
    sightings: tuple[Sighting, ...]
    seq: int = 0
    mode: ModeLabel | None = None

    def __post_init__(self):
        if len(self.sightings) < 2:
            raise ValueError("a trip needs at least 2 sightings")
        if not self.arrive_t > self.depart_t:
            raise ValueError("trip must have positive duration")

    @property
    def trip_id(self) -> str:
        return f"{self.device_id}:{self.seq}"

    @property
    def origin(self) -> GeoPoint:
        return self.sightings[0].position

    @property
    def destination(self) -> GeoPoint:
        return self.sightings[-1].position

    @property
    def depart_t(self) -> float:
        return self.sightings[0].t

    @property
    def arrive_t(self) -> float:
        return self.sightings[-1].t


def _local_xy(sightings: Sequence[Sighting]) -> np.ndarray:
    if not sightings:
        return np.empty((0, 2))
    ref = sightings[0].position
    x, y = project_arrays([s.position.lat for s in sightings], [s.position.lon for s in sightings], ref)
    return np.column_stack([x, y])


def _stay_mask(xy: np.ndarray, t: np.ndarray, radius: float, dwell_time: float) -> np.ndarray:
    # sliding staypoint detection: anchor i absorbs following points while they stay within radius
    n = len(t)
    stay = np.zeros(n, dtype=bool)
    r2 = radius * radius
    xs, ys, ts = xy[:, 0].tolist(), xy[:, 1].tolist(), t.tolist()
    i = 0
    while i < n:
        j = i + 1
        while j < n and (xs[j] - xs[i]) ** 2 + (ys[j] - ys[i]) ** 2 <= r2:
            j += 1
        if ts[j - 1] - ts[i] >= dwell_time:
            # an anchor on the approach path can absorb departing points on the same line;
            # keep only the run's points within radius of its median position
            cx, cy = np.median(xy[i:j], axis=0)
            lo, hi = i, j
            while lo < hi and (xs[lo] - cx) ** 2 + (ys[lo] - cy) ** 2 > r2:
                lo += 1
            while hi > lo and (xs[hi - 1] - cx) ** 2 + (ys[hi - 1] - cy) ** 2 > r2:
                hi -= 1
            stay[lo:hi] = True
            i = j
        else:
            i += 1
    return stay


def identify_trips(
    stream: Sequence[Sighting],
    dwell_radius: float = DWELL_RADIUS_M,
    dwell_time: float = DWELL_TIME_S,
    min_span: float = MIN_TRIP_SPAN_M,
) -> list[Trip]:
    """Split one device's time-sorted stream into trips separated by dwells.

    Sightings belonging to a dwell (the device stays within ``dwell_radius``
    of an anchor for at least ``dwell_time``) are excluded; each maximal run
    of remaining sightings is a candidate trip, kept if it has 2+ sightings,
    positive duration and reaches ``min_span`` crow-fly from its origin.
    """
    if not stream:
        return []
    xy = _local_xy(stream)
    t = np.asarray([s.t for s in stream], dtype=float)
    if np.any(np.diff(t) < 0):
        raise ValueError("sightings must be sorted by time")
    stay = _stay_mask(xy, t, dwell_radius, dwell_time)

    trips = []
    run_start = None
    for k in range(len(stream) + 1):
        moving = k < len(stream) and not stay[k]
        if moving and run_start is None:
            run_start = k
        elif not moving and run_start is not None:
            seg = slice(run_start, k)
            run_start = None
            if k - seg.start < 2 or t[k - 1] <= t[seg.start]:
                continue
            span = np.hypot(*(xy[seg] - xy[seg.start]).T).max()
            if span < min_span:
                continue
            trips.append(Trip(stream[0].device_id, tuple(stream[seg]), seq=len(trips)))
    return trips


def segment_speeds(trip: Trip) -> np.ndarray:
    xy = _local_xy(trip.sightings)
    t = np.asarray([s.t for s in trip.sightings], dtype=float)
    dt = np.diff(t)
    d = np.hypot(*np.diff(xy, axis=0).T)
    ok = dt > 0
    return d[ok] / dt[ok]


def _point_polyline_distance(px: np.ndarray, py: np.ndarray, line: np.ndarray) -> np.ndarray:
    best = np.full(len(px), np.inf)
    for (ax, ay), (bx, by) in zip(line[:-1], line[1:]):
        vx, vy = bx - ax, by - ay
        vv = vx * vx + vy * vy
        if vv == 0:
            u = np.zeros(len(px))
        else:
            u = np.clip(((px - ax) * vx + (py - ay) * vy) / vv, 0.0, 1.0)
        best = np.minimum(best, np.hypot(px - (ax + u * vx), py - (ay + u * vy)))
    return best


def impute_mode(
    trip: Trip,
    rail_lines: Iterable[Sequence[GeoPoint]] | None = None,
    air_speed: float = AIR_SPEED_MPS,
    slow_speed: float = NONMOTORIZED_SPEED_MPS,
) -> ModeLabel:
    """Ordered rules: air, nonmotorized, rail (if rail geometry given), drive."""
    speeds = segment_speeds(trip)
    if len(speeds) == 0:
        return ModeLabel.UNKNOWN
    p95 = float(np.percentile(speeds, 95))
    if p95 > air_speed:
        return ModeLabel.AIR
    if p95 <= slow_speed:
        return ModeLabel.NONMOTORIZED
    if rail_lines:
        ref = trip.origin
        px, py = project_arrays([s.position.lat for s in trip.sightings], [s.position.lon for s in trip.sightings], ref)
        near = np.full(len(px), np.inf)
        for line in rail_lines:
            lx, ly = project_arrays([p.lat for p in line], [p.lon for p in line], ref)
            near = np.minimum(near, _point_polyline_distance(px, py, np.column_stack([lx, ly])))
        if np.mean(near <= RAIL_BUFFER_M) >= RAIL_SHARE:
            return ModeLabel.RAIL
    return ModeLabel.DRIVE


def filter_vehicle_trips(trips: Iterable[Trip]) -> list[Trip]:
    return [trip for trip in trips if trip.mode is ModeLabel.DRIVE]


def read_sightings(path: str | Path) -> dict[str, list[Sighting]]:
    """Read a (optionally gzipped) sightings CSV grouped per device, time-sorted."""
    df = pd.read_csv(path, dtype={"device_id": str}, compression="infer", float_precision="round_trip")
    missing = {"device_id", "timestamp", "lat", "lon"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing sightings columns {sorted(missing)}")
    return sightings_from_frame(df)


def sightings_from_frame(df: pd.DataFrame) -> dict[str, list[Sighting]]:
    if df.empty:
        return {}
    df = df.sort_values(["device_id", "timestamp"], kind="mergesort")
    acc = df["accuracy"].tolist() if "accuracy" in df.columns else [None] * len(df)
    out: dict[str, list[Sighting]] = {}
    for dev, t, lat, lon, a in zip(df["device_id"].tolist(), df["timestamp"].tolist(), df["lat"].tolist(), df["lon"].tolist(), acc):
        a = None if a is None or (isinstance(a, float) and math.isnan(a)) else float(a)
        out.setdefault(dev, []).append(Sighting(dev, float(t), GeoPoint(float(lat), float(lon)), a))
    return out


def write_sightings(sightings: Iterable[Sighting], path: str | Path) -> None:
    rows = [
        (s.device_id, repr(s.t), repr(s.position.lat), repr(s.position.lon), "" if s.accuracy is None else repr(s.accuracy))
        for s in sightings
    ]
    df = pd.DataFrame(rows, columns=["device_id", "timestamp", "lat", "lon", "accuracy"])
    if not str(path).endswith(".gz"):
        df.to_csv(path, index=False)
        return
    # empty header name and zero mtime keep the bytes independent of path and clock
    with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
        gz.write(df.to_csv(index=False).encode())

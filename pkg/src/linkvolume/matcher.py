"""Heading-gated snapping of trip sightings to candidate links."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .netmodel import GeoPoint, RoadNetwork, angular_difference, bearing, project_arrays
from .spatial_index import DEFAULT_RADIUS_M, SpatialIndex
from .trips import Sighting, Trip

HEADING_GATE_DEG = 30.0
DISTANCE_MODES = ("segment", "vertex")
TIE_EPS_M = 1e-6
LOOKAHEAD_M = 1.0


class MatchedPoint(NamedTuple):
    sighting: Sighting
    index: int  # position of the sighting within its trip
    heading: float
    link_id: int
    distance: float


@dataclass(frozen=True)
class MatchedTrajectory:
    trip: Trip
    points: tuple[MatchedPoint, ...]
    xy: np.ndarray  # projected positions of every trip sighting

    @property
    def trip_id(self) -> str:
        return self.trip.trip_id

    @property
    def link_sequence(self) -> list[int]:
        return [p.link_id for p in self.points]


@dataclass(frozen=True)
class MatchOptions:
    radius: float = DEFAULT_RADIUS_M
    heading_gate: float = HEADING_GATE_DEG
    distance_mode: str = "segment"

    def __post_init__(self):
        if self.distance_mode not in DISTANCE_MODES:
            raise ValueError(f"distance_mode must be one of {DISTANCE_MODES}")


def travel_heading(a: Sighting, b: Sighting, ref: GeoPoint) -> float | None:
    x, y = project_arrays([a.position.lat, b.position.lat], [a.position.lon, b.position.lon], ref)
    dx, dy = float(x[1] - x[0]), float(y[1] - y[0])
    if dx == 0.0 and dy == 0.0:
        return None
    return bearing(dx, dy)


def sighting_headings(xy: np.ndarray) -> list[float | None]:
    """Heading toward the next sighting; the last sighting reuses the previous one.

    A sighting coincident with its successor carries the last defined heading
    forward, or has none if no heading was defined yet.
    """
    n = len(xy)
    seg: list[float | None] = []
    for k in range(n - 1):
        dx, dy = float(xy[k + 1, 0] - xy[k, 0]), float(xy[k + 1, 1] - xy[k, 1])
        seg.append(None if dx == 0.0 and dy == 0.0 else bearing(dx, dy))
    if n >= 2:
        seg.append(seg[-1])
    out: list[float | None] = []
    last = None
    for h in seg:
        if h is not None:
            last = h
        out.append(last)
    return out


def _segment_distance(px: float, py: float, line: np.ndarray) -> float:
    a = line[:-1]
    v = line[1:] - a
    vv = (v * v).sum(axis=1)
    w = np.array([px, py]) - a
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(vv > 0, (w * v).sum(axis=1) / vv, 0.0)
    u = np.clip(u, 0.0, 1.0)
    d = np.hypot(w[:, 0] - u * v[:, 0], w[:, 1] - u * v[:, 1])
    return float(d.min())


def _select(
    px: float,
    py: float,
    heading: float,
    hits: list[tuple[float, int]],
    idx: SpatialIndex,
    net: RoadNetwork,
    opts: MatchOptions,
) -> tuple[int, float] | None:
    link_ids = idx.link_ids
    seen = set()
    qualified: list[tuple[float, int]] = []
    for dist, row in hits:
        lid = int(link_ids[row])
        if lid in seen:
            continue
        seen.add(lid)
        if not angular_difference(heading, net.direction(lid)) < opts.heading_gate:
            continue
        if opts.distance_mode == "vertex":
            # hits arrive sorted by (distance, link_id): first survivor wins
            return lid, dist
        qualified.append((_segment_distance(px, py, net.link_xy(lid)), lid))
    if not qualified:
        return None
    best_d = min(d for d, _ in qualified)
    tied = [(d, lid) for d, lid in qualified if d <= best_d + TIE_EPS_M]
    if len(tied) == 1:
        return tied[0][1], tied[0][0]
    # links sharing a node are equidistant from points near it; prefer the one
    # the sighting is moving onto
    hx, hy = math.cos(math.radians(heading)), math.sin(math.radians(heading))
    ax, ay = px + LOOKAHEAD_M * hx, py + LOOKAHEAD_M * hy
    _, d, lid = min((_segment_distance(ax, ay, net.link_xy(lid)), d, lid) for d, lid in tied)
    return lid, d


def match_sighting(
    s: Sighting,
    heading: float | None,
    idx: SpatialIndex,
    net: RoadNetwork,
    opts: MatchOptions = MatchOptions(),
) -> tuple[int, float] | None:
    """Closest heading-compatible link among vertices within the search radius.

    Candidates are links owning an indexed vertex within ``opts.radius``; a
    link qualifies when its direction differs from ``heading`` by strictly
    less than the gate. ``distance_mode="vertex"`` ranks by the candidate
    vertex distance, ties to the smaller link id. ``"segment"`` ranks
    qualifying links by distance to their polyline; equidistant links are
    separated by the distance of a point 1 m further along the heading,
    then by link id.
    """
    if heading is None:
        return None
    p = net.project(s.position)
    hits = idx.query_indices(p.x, p.y, opts.radius)
    return _select(p.x, p.y, heading, hits, idx, net, opts)


def match_trajectory(
    trip: Trip,
    idx: SpatialIndex,
    net: RoadNetwork,
    opts: MatchOptions = MatchOptions(),
) -> MatchedTrajectory:
    sightings = trip.sightings
    x, y = project_arrays([s.position.lat for s in sightings], [s.position.lon for s in sightings], net.projection_ref)
    xy = np.column_stack([x, y])
    xy.setflags(write=False)
    headings = sighting_headings(xy)
    hits = idx.query_indices_many(xy, opts.radius)

    points: list[MatchedPoint] = []
    for k, s in enumerate(sightings):
        h = headings[k]
        if h is None:
            continue
        found = _select(float(xy[k, 0]), float(xy[k, 1]), h, hits[k], idx, net, opts)
        if found is None:
            continue
        lid, dist = found
        if points and points[-1].link_id == lid:
            continue  # collapse runs on one link, keeping the earliest observation
        points.append(MatchedPoint(s, k, h, lid, dist))
    if len(points) < 2:
        points = []
    return MatchedTrajectory(trip, tuple(points), xy)


def debug_rows(trip: Trip, idx: SpatialIndex, net: RoadNetwork, opts: MatchOptions = MatchOptions()) -> list[dict]:
    """Per-sighting diagnostics: candidates considered, chosen link, distance, heading difference."""
    sightings = trip.sightings
    x, y = project_arrays([s.position.lat for s in sightings], [s.position.lon for s in sightings], net.projection_ref)
    xy = np.column_stack([x, y])
    headings = sighting_headings(xy)
    rows = []
    for k, (s, h) in enumerate(zip(sightings, headings)):
        hits = idx.query_indices(float(xy[k, 0]), float(xy[k, 1]), opts.radius)
        candidates = sorted({int(idx.link_ids[r]) for _, r in hits})
        found = None if h is None else _select(float(xy[k, 0]), float(xy[k, 1]), h, hits, idx, net, opts)
        rows.append(
            {
                "trip_id": trip.trip_id,
                "sighting": k,
                "t": s.t,
                "heading": "" if h is None else round(h, 6),
                "candidates": ";".join(map(str, candidates)),
                "link_id": "" if found is None else found[0],
                "distance": "" if found is None else round(found[1], 6),
                "heading_diff": "" if found is None else round(angular_difference(h, net.direction(found[0])), 6),
            }
        )
    return rows


def is_valid_point(p: MatchedPoint, net: RoadNetwork, opts: MatchOptions = MatchOptions()) -> bool:
    return p.distance <= opts.radius and angular_difference(p.heading, net.direction(p.link_id)) < opts.heading_gate and not math.isnan(p.heading)

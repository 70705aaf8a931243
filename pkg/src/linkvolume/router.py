"""Shortest-path gap filling with routed-distance and speed checks."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .matcher import MatchedTrajectory
from .netmodel import RoadNetwork

DISTANCE_EXCESS_M = 2000.0
MAX_SPEED_MPS = 50.0
SEARCH_CAP_M = 10_000.0


@dataclass(frozen=True)
class RouterOptions:
    distance_excess: float = DISTANCE_EXCESS_M
    max_speed: float = MAX_SPEED_MPS
    search_cap: float | None = SEARCH_CAP_M


@dataclass(frozen=True)
class Route:
    trip_id: str
    links: tuple[int, ...]
    routed_length: float
    valid: bool
    removed_sightings: int = 0
    device_id: str = ""
    depart_t: float = math.nan
    arrive_t: float = math.nan
    gaps: tuple["GapCheck", ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class GapCheck:
    from_link: int
    to_link: int
    routed: float
    cumulative: float
    dt: float


def shortest_path(
    net: RoadNetwork,
    from_node: int,
    to_node: int,
    max_distance: float | None = None,
) -> tuple[list[int], float] | None:
    """Minimum-length directed path as (link ids, meters), or None.

    Label-setting search with early exit at the target. With
    ``max_distance`` set, the search gives up once every remaining label
    exceeds it.
    """
    if from_node not in net.nodes or to_node not in net.nodes:
        raise KeyError(f"unknown node {from_node if from_node not in net.nodes else to_node}")
    if from_node == to_node:
        return [], 0.0
    links = net.links
    adjacency = net.adjacency
    dist = {from_node: 0.0}
    via: dict[int, int] = {}
    done = set()
    heap = [(0.0, from_node)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        if max_distance is not None and d > max_distance:
            return None
        if u == to_node:
            path = []
            while u != from_node:
                lid = via[u]
                path.append(lid)
                u = links[lid].from_node
            path.reverse()
            return path, d
        done.add(u)
        for lid in adjacency[u]:
            link = links[lid]
            v = link.to_node
            nd = d + link.length
            if v not in done and nd < dist.get(v, math.inf):
                dist[v] = nd
                via[v] = lid
                heapq.heappush(heap, (nd, v))
    return None


def check_distance(routed: float, cumulative: float, excess: float = DISTANCE_EXCESS_M) -> bool:
    return routed - cumulative < excess


def check_speed(routed: float, dt: float, max_speed: float = MAX_SPEED_MPS) -> bool:
    if not dt > 0:
        return False
    return routed / dt <= max_speed


def _path_length(xy: np.ndarray, indices: list[int]) -> float:
    if len(indices) < 2:
        return 0.0
    pts = xy[indices]
    return float(np.hypot(*np.diff(pts, axis=0).T).sum())


def route_trip(mt: MatchedTrajectory, net: RoadNetwork, opts: RouterOptions = RouterOptions()) -> Route:
    """Join the observed links of ``mt`` into one connected route.

    For each consecutive pair of surviving matched points the gap runs from
    the end node of the earlier link to the start node of the later one. The
    routed distance is the gap length; it is checked against the straight
    distance along the surviving raw sightings between the pair and against
    the time between them. A failing pair drops the later point and retries
    with the next one. If nothing after the current point passes, the prefix
    route is kept.
    """
    trip = mt.trip
    meta = dict(trip_id=trip.trip_id, device_id=trip.device_id, depart_t=trip.depart_t, arrive_t=trip.arrive_t)
    points = mt.points
    if len(points) < 2:
        return Route(links=(), routed_length=0.0, valid=False, **meta)

    links = net.links
    removed_idx: set[int] = set()
    removed = 0
    cur = points[0]
    out = [cur.link_id]
    gaps = []
    survivors = 1
    for nxt in points[1:]:
        if nxt.link_id == cur.link_id:
            continue  # earlier removals can bring a repeat of the current link forward
        found = shortest_path(net, links[cur.link_id].to_node, links[nxt.link_id].from_node, opts.search_cap)
        ok = found is not None
        if ok:
            gap, routed = found
            span = [k for k in range(cur.index, nxt.index + 1) if k not in removed_idx]
            cumulative = _path_length(mt.xy, span)
            dt = nxt.sighting.t - cur.sighting.t
            ok = check_distance(routed, cumulative, opts.distance_excess) and check_speed(routed, dt, opts.max_speed)
        if not ok:
            removed += 1
            removed_idx.add(nxt.index)
            continue
        gaps.append(GapCheck(cur.link_id, nxt.link_id, routed, cumulative, dt))
        for lid in gap:
            if lid != out[-1]:
                out.append(lid)
        if nxt.link_id != out[-1]:
            out.append(nxt.link_id)
        cur = nxt
        survivors += 1

    if survivors < 2:
        return Route(links=(), routed_length=0.0, valid=False, removed_sightings=removed, **meta)
    length = sum(links[lid].length for lid in out)
    return Route(links=tuple(out), routed_length=length, valid=True, removed_sightings=removed, gaps=tuple(gaps), **meta)


def is_connected_walk(links: tuple[int, ...] | list[int], net: RoadNetwork) -> bool:
    return all(net.links[a].to_node == net.links[b].from_node for a, b in zip(links, links[1:]))

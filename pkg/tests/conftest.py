from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np
import pytest

from linkvolume.matcher import MatchedPoint, MatchedTrajectory
from linkvolume.netmodel import FunctionalClass, GeoPoint, Link, Node, PlanePoint, RoadNetwork, Stratum, project_arrays, unproject
from linkvolume.simgen import SimConfig, generate_network
from linkvolume.trips import Sighting, Trip
from linkvolume.volume import METERS_PER_MILE

REF = GeoPoint(39.0, -76.9)

# L-shaped route: two eastbound links then two northbound links, with reverse twins
L_NODES = {1: (0, 0), 2: (200, 0), 3: (400, 0), 4: (400, 200), 5: (400, 400)}
L_LINKS = [(1, 1, 2), (2, 2, 3), (3, 3, 4), (4, 4, 5), (11, 2, 1), (12, 3, 2), (13, 4, 3), (14, 5, 4)]
L_SIGHTINGS = [(60, 2), (140, 2), (260, -2), (340, -2), (398, 60), (402, 140), (398, 260), (402, 340)]


def geo(x: float, y: float, ref: GeoPoint = REF) -> GeoPoint:
    return unproject(PlanePoint(x, y), ref)


def plane_network(
    node_xy: Mapping[int, tuple[float, float]],
    links: Iterable[Sequence],
    ref: GeoPoint = REF,
    **attrs,
) -> RoadNetwork:
    """Network from plane coordinates; each link tuple is (link_id, from, to[, length[, link_type]])."""
    nodes = {nid: Node(nid, geo(x, y, ref)) for nid, (x, y) in node_xy.items()}
    out = {}
    for row in links:
        lid, a, b = row[:3]
        (ax, ay), (bx, by) = node_xy[a], node_xy[b]
        length = row[3] if len(row) > 3 and row[3] is not None else math.hypot(bx - ax, by - ay)
        link_type = row[4] if len(row) > 4 else "residential"
        out[lid] = Link(
            lid, a, b, (nodes[a].position, nodes[b].position), float(length), link_type,
            **{"lanes": 1, "speed_limit": 13.9, **attrs},
        )
    return RoadNetwork(nodes, out, ref)


def make_trip(xy: Sequence[tuple[float, float]], t: Sequence[float] | None = None, device: str = "d0", ref: GeoPoint = REF) -> Trip:
    t = list(range(0, 10 * len(xy), 10)) if t is None else list(t)
    return Trip(device, tuple(Sighting(device, float(ti), geo(x, y, ref)) for (x, y), ti in zip(xy, t)))


def make_trajectory(
    trip: Trip,
    matches: Sequence[tuple[int, int]],
    ref: GeoPoint = REF,
    xy: np.ndarray | None = None,
) -> MatchedTrajectory:
    """Hand-built MatchedTrajectory from (sighting index, link id) pairs.

    ``xy`` overrides the projected sighting positions, so distances in
    boundary fixtures are exact.
    """
    s = trip.sightings
    if xy is None:
        x, y = project_arrays([p.position.lat for p in s], [p.position.lon for p in s], ref)
        xy = np.column_stack([x, y])
    xy = np.asarray(xy, dtype=float)
    points = tuple(MatchedPoint(s[k], k, 0.0, lid, 0.0) for k, lid in matches)
    return MatchedTrajectory(trip, points, xy)


@pytest.fixture
def grid4():
    return generate_network(SimConfig(rows=4, cols=4, edge_length=100.0))


# hand-built two-stratum, five-link weighting example
A = Stratum("1", True, FunctionalClass.NON_HIGHWAY)
B = Stratum("2", False, FunctionalClass.HIGHWAY)
# link id -> (length in miles, stratum)
HAND_LINKS = {1: (1.0, A), 2: (2.0, A), 3: (0.5, A), 4: (3.0, B), 5: (1.0, B)}
HAND_OBSERVED = {1: 2, 2: 3, 3: 5, 4: 4, 5: 1}
HAND_AVMT = {A: 1000.0, B: 600.0}


def hand_network():
    nodes = {k: Node(k, geo(100.0 * k, 0.0)) for k in range(1, 7)}
    links = {}
    for lid, (miles, s) in HAND_LINKS.items():
        link_type = "motorway" if s.functional_class is FunctionalClass.HIGHWAY else "residential"
        links[lid] = Link(
            lid, lid, lid + 1, (nodes[lid].position, nodes[lid + 1].position),
            miles * METERS_PER_MILE, link_type, 1, 10.0, s.county, s.urban,
        )
    return RoadNetwork(nodes, links)


# one PASS/FAIL line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

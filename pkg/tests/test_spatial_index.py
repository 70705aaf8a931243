from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linkvolume.netmodel import PlanePoint, RoadNetwork
from linkvolume.simgen import SimConfig, generate_network
from linkvolume.spatial_index import (
    SpatialIndex,
    build_index,
    consecutive_spacings,
    densify_geometry,
    node_spacing_stats,
    radius_query,
)

from conftest import plane_network
from oracles import brute_force_radius


def test_densify_250m_link():
    net = plane_network({1: (0, 0), 2: (250, 0)}, [(1, 1, 2)])
    out = densify_geometry(net)
    assert len(out.links[1].geometry) == 4
    gaps = consecutive_spacings(out)
    assert np.allclose(gaps, 250 / 3, atol=1e-6)
    assert out.links[1].length == net.links[1].length
    assert out.links[1].geometry[0] == net.links[1].geometry[0]
    assert out.links[1].geometry[-1] == net.links[1].geometry[-1]


def test_densify_short_link_unchanged():
    net = plane_network({1: (0, 0), 2: (80, 0)}, [(1, 1, 2)])
    assert densify_geometry(net) is net


def test_densify_compliant_grid_is_noop(grid4):
    assert densify_geometry(grid4) is grid4


def test_densify_exactly_100m_not_split():
    net = plane_network({1: (0, 0), 2: (100, 0)}, [(1, 1, 2)])
    assert len(densify_geometry(net).links[1].geometry) == 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-3000, 3000), st.floats(-3000, 3000)), min_size=2, max_size=6, unique=True))
def test_densify_guarantee_and_idempotence(pts):
    node_xy = {i + 1: p for i, p in enumerate(pts)}
    links = [(i, i, i + 1) for i in range(1, len(pts)) if math.dist(pts[i - 1], pts[i]) > 1.0]
    if not links:
        return
    net = plane_network(node_xy, links)
    once = densify_geometry(net)
    assert node_spacing_stats(once).share_within == 1.0
    assert consecutive_spacings(once).max() <= 100.0 + 1e-6
    twice = densify_geometry(once)
    assert twice is once


def test_index_sizes(grid4):
    one = plane_network({1: (0, 0), 2: (50, 0)}, [(1, 1, 2)])
    assert len(build_index(one)) == 2
    assert len(build_index(grid4)) == sum(len(lk.geometry) for lk in grid4.links.values()) == 96


def test_empty_index():
    idx = build_index(RoadNetwork({}, {}))
    assert len(idx) == 0
    assert radius_query(idx, PlanePoint(0, 0), 500) == []
    assert idx.query_indices_many(np.zeros((3, 2)), 10) == [[], [], []]


def test_query_outside_radius_and_identity():
    net = plane_network({1: (0, 0), 2: (50, 0)}, [(1, 1, 2)])
    idx = build_index(net)
    assert radius_query(idx, PlanePoint(200, 0)) == []
    hits = radius_query(idx, idx.point(1).position)
    assert hits[0].distance == 0.0 and hits[0].point.link_id == 1 and hits[0].point.seq == 1
    assert [h.point.seq for h in hits] == [1, 0]


def test_query_radius_must_be_positive():
    idx = build_index(plane_network({1: (0, 0), 2: (50, 0)}, [(1, 1, 2)]))
    with pytest.raises(ValueError):
        radius_query(idx, PlanePoint(0, 0), 0)


def test_random_cloud_matches_brute_force():
    rng = np.random.default_rng(7)
    xy = rng.uniform(-500, 500, size=(200, 2))
    idx = SpatialIndex(xy, np.arange(200), np.zeros(200))
    for q in rng.uniform(-600, 600, size=(50, 2)):
        for r in (10.0, 100.0, 500.0):
            got = {k for _, k in idx.query_indices(q[0], q[1], r)}
            assert got == brute_force_radius(idx, q[0], q[1], r)


def test_results_sorted_with_link_tie_break():
    # two links share a vertex: equal distance resolved by link id, then seq
    net = plane_network({1: (0, 0), 2: (60, 0), 3: (0, 60)}, [(5, 1, 2), (3, 1, 3)])
    idx = build_index(net)
    hits = radius_query(idx, PlanePoint(0, 0), 100)
    assert [(h.point.link_id, h.point.seq) for h in hits[:2]] == [(3, 0), (5, 0)]
    d = [h.distance for h in hits]
    assert d == sorted(d)


def test_boundary_point_included():
    idx = SpatialIndex(np.array([[100.0, 0.0]]), np.array([1]), np.array([0]))
    assert len(idx.query_indices(0.0, 0.0, 100.0)) == 1
    assert idx.query_indices(0.0, 0.0, 99.999999) == []


def test_queries_do_not_mutate(grid4):
    idx = build_index(grid4)
    before = (idx.xy.copy(), idx.link_ids.copy())
    a = idx.query_indices(10, 10, 150)
    b = idx.query_indices(10, 10, 150)
    assert a == b
    assert np.array_equal(before[0], idx.xy) and np.array_equal(before[1], idx.link_ids)
    with pytest.raises(ValueError):
        idx.xy[0, 0] = 1.0


def test_spacing_stats_cases(grid4):
    single = plane_network({1: (0, 0), 2: (250, 0)}, [(1, 1, 2)])
    assert node_spacing_stats(single).share_within == 0.0
    stats = node_spacing_stats(grid4)
    assert stats.count == 48
    assert np.allclose(consecutive_spacings(grid4), 100.0, atol=1e-6)
    assert stats.share_within == 1.0
    assert node_spacing_stats(densify_geometry(single)).share_within == 1.0


def test_densified_large_grid_spacing():
    net = densify_geometry(generate_network(SimConfig(rows=5, cols=5, edge_length=730.0)))
    assert node_spacing_stats(net).share_within == 1.0

from __future__ import annotations

import math
from dataclasses import replace

import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linkvolume.netmodel import (
    DEFAULT_SPEED_MPS,
    FunctionalClass,
    GeoPoint,
    Link,
    NetworkLoadError,
    Node,
    RoadNetwork,
    Stratum,
    angular_difference,
    classify_stratum,
    impute_missing_attributes,
    link_direction,
    load_network,
    project,
    unproject,
    write_network,
)

from conftest import REF, geo, plane_network

angles = st.floats(min_value=0.0, max_value=360.0, exclude_max=True, allow_nan=False)


def _link(lid, link_type="residential", county="24031", urban=True, lanes=None, speed=None):
    a, b = GeoPoint(39.0, -76.9), GeoPoint(39.0, -76.899)
    return Link(lid, 1, 2, (a, b), 86.0, link_type, lanes, speed, county, urban)


def _net(links):
    nodes = {1: Node(1, GeoPoint(39.0, -76.9)), 2: Node(2, GeoPoint(39.0, -76.899))}
    return RoadNetwork(nodes, {lk.link_id: lk for lk in links})


# --- projection --------------------------------------------------------------------


def test_project_identity():
    p = project(REF, REF)
    assert p.x == 0.0 and p.y == 0.0


def test_project_one_degree_latitude():
    # closed form: pi / 180 * 6371000
    oracle = math.pi / 180.0 * 6_371_000.0
    p = project(GeoPoint(REF.lat + 1.0, REF.lon), REF)
    assert p.y == pytest.approx(oracle, abs=1e-9)
    assert p.y == pytest.approx(111_194.93, abs=0.01)
    assert p.x == pytest.approx(0.0, abs=1e-9)


def test_project_one_degree_longitude_at_60():
    ref = GeoPoint(60.0, 10.0)
    p = project(GeoPoint(60.0, 11.0), ref)
    assert p.x == pytest.approx(55_597.46, abs=0.01)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(min_value=-0.5, max_value=0.5),
    st.floats(min_value=-0.5, max_value=0.5),
    st.floats(min_value=-60.0, max_value=60.0),
)
def test_project_round_trip(dlat, dlon, lat0):
    ref = GeoPoint(lat0, 20.0)
    p = GeoPoint(lat0 + dlat, 20.0 + dlon)
    back = unproject(project(p, ref), ref)
    assert abs(back.lat - p.lat) < 1e-6 and abs(back.lon - p.lon) < 1e-6


@settings(max_examples=100, deadline=None)
@given(
    st.tuples(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2)),
    st.tuples(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2)),
)
def test_project_injective(a, b):
    ga, gb = GeoPoint(REF.lat + a[0], REF.lon + a[1]), GeoPoint(REF.lat + b[0], REF.lon + b[1])
    pa, pb = project(ga, REF), project(gb, REF)
    if ga != gb:
        assert (pa.x, pa.y) != (pb.x, pb.y)


def test_geopoint_range_checked():
    with pytest.raises(ValueError):
        GeoPoint(91.0, 0.0)
    with pytest.raises(ValueError):
        GeoPoint(0.0, -181.0)


# --- directions ----------------------------------------------------------------------


@pytest.mark.parametrize("dx,dy,expected", [(100, 0, 0.0), (0, 100, 90.0), (50, 50, 45.0), (-100, 0, 180.0), (0, -100, 270.0)])
def test_link_direction_axes(dx, dy, expected):
    link = Link(1, 1, 2, (geo(0, 0), geo(dx, dy)), 100.0, "residential")
    assert link_direction(link, REF) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(-500, 500), st.floats(-500, 500))
def test_reversed_twin_differs_by_180(dx, dy):
    if math.hypot(dx, dy) < 1e-3:
        return
    fwd = Link(1, 1, 2, (geo(0, 0), geo(dx, dy)), 1.0, "residential")
    rev = Link(2, 2, 1, (geo(dx, dy), geo(0, 0)), 1.0, "residential")
    assert angular_difference(link_direction(fwd, REF), link_direction(rev, REF)) == pytest.approx(180.0, abs=1e-6)


@pytest.mark.parametrize("a,b,expected", [(10, 350, 20), (0, 180, 180), (45, 45, 0)])
def test_angular_difference_cases(a, b, expected):
    assert angular_difference(a, b) == pytest.approx(expected)


@settings(max_examples=300, deadline=None)
@given(angles, angles, angles)
def test_angular_difference_metric(a, b, c):
    assert angular_difference(a, b) == pytest.approx(angular_difference(b, a))
    assert 0.0 <= angular_difference(a, b) <= 180.0
    assert angular_difference(a, c) <= angular_difference(a, b) + angular_difference(b, c) + 1e-9


# --- strata and imputation ------------------------------------------------------------


def test_classify_stratum_cases():
    assert classify_stratum(_link(1, "motorway", "24031", True)) == Stratum("24031", True, FunctionalClass.HIGHWAY)
    assert classify_stratum(_link(1, "residential", "24031", False)) == Stratum("24031", False, FunctionalClass.NON_HIGHWAY)
    assert classify_stratum(_link(1, "ramp")).functional_class is FunctionalClass.HIGHWAY
    assert classify_stratum(_link(1, "trunk")).functional_class is FunctionalClass.HIGHWAY


def test_unknown_link_type_is_non_highway(caplog):
    s = classify_stratum(_link(1, "hovercraft_lane"))
    assert s.functional_class is FunctionalClass.NON_HIGHWAY
    assert "unknown link_type" in caplog.text


def test_strata_partition_covers_links(grid4):
    strata = grid4.strata()
    assert set(strata) == set(grid4.links)
    groups = {}
    for lid, s in strata.items():
        groups.setdefault(s, []).append(lid)
    assert sum(len(v) for v in groups.values()) == len(grid4.links)


def test_impute_lanes_median_of_peers():
    net = _net([_link(1, lanes=2), _link(2, lanes=2), _link(3, lanes=4), _link(4, lanes=None)])
    out = impute_missing_attributes(net)
    assert out.links[4].lanes == 2
    assert [out.links[i].lanes for i in (1, 2, 3)] == [2, 2, 4]


def test_impute_falls_back_to_functional_class():
    # no peer in the rural stratum; the urban non-highway link supplies the class median
    net = _net([_link(1, urban=True, lanes=3, speed=20.0), _link(2, urban=False)])
    out = impute_missing_attributes(net)
    assert out.links[2].lanes == 3 and out.links[2].speed_limit == 20.0


def test_impute_global_default_speed():
    net = _net([_link(1, lanes=1), _link(2, "motorway", lanes=3)])
    out = impute_missing_attributes(net)
    assert all(lk.speed_limit == DEFAULT_SPEED_MPS == 13.9 for lk in out.links.values())


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.sampled_from(["motorway", "primary", "residential"]),
            st.booleans(),
            st.one_of(st.none(), st.integers(1, 6)),
            st.one_of(st.none(), st.floats(5.0, 35.0)),
        ),
        min_size=1,
        max_size=12,
    )
)
def test_impute_total_and_preserving(specs):
    links = [_link(i + 1, lt, "24031", urban, lanes, speed) for i, (lt, urban, lanes, speed) in enumerate(specs)]
    out = impute_missing_attributes(_net(links))
    for before in links:
        after = out.links[before.link_id]
        assert after.lanes is not None and after.speed_limit is not None
        if before.lanes is not None:
            assert after.lanes == before.lanes
        if before.speed_limit is not None:
            assert after.speed_limit == before.speed_limit


# --- loading ------------------------------------------------------------------------------


def _write_pair(tmp_path, nodes, links):
    pd.DataFrame(nodes).to_csv(tmp_path / "node.csv", index=False)
    pd.DataFrame(links).to_csv(tmp_path / "link.csv", index=False)
    return tmp_path / "node.csv", tmp_path / "link.csv"


NODES = [{"node_id": 1, "x_coord": -76.9, "y_coord": 39.0}, {"node_id": 2, "x_coord": -76.899, "y_coord": 39.0}]
LINK = {
    "link_id": 10, "from_node_id": 1, "to_node_id": 2, "length": 86.5,
    "geometry": "LINESTRING (-76.9 39.0, -76.899 39.0)", "link_type": "primary",
    "lanes": 2, "free_speed": 72, "county": "24031", "urban": 1,
}


def test_load_minimal(tmp_path):
    net = load_network(*_write_pair(tmp_path, NODES, [LINK]))
    assert len(net.nodes) == 2 and len(net.links) == 1
    link = net.links[10]
    assert link.speed_limit == pytest.approx(20.0)
    assert link.county == "24031" and link.urban and link.lanes == 2
    assert net.projection_ref == GeoPoint(39.0, -76.8995)


def test_load_rejects_dangling_node(tmp_path):
    bad = {**LINK, "link_id": 11, "to_node_id": 99}
    net = load_network(*_write_pair(tmp_path, NODES, [LINK, bad]))
    assert list(net.links) == [10]
    assert len(net.rejections) == 1 and net.rejections[0].link_id == 11


@pytest.mark.parametrize(
    "patch",
    [
        {"length": 0},
        {"to_node_id": 1},
        {"geometry": "LINESTRING (-76.9 39.0, -76.898 39.0)"},
        {"geometry": "POINT (-76.9 39.0)"},
    ],
)
def test_load_rejects_invalid_rows(tmp_path, patch):
    net = load_network(*_write_pair(tmp_path, NODES, [LINK, {**LINK, "link_id": 11, **patch}]))
    assert list(net.links) == [10] and len(net.rejections) == 1


def test_load_missing_column_is_fatal(tmp_path):
    link = {k: v for k, v in LINK.items() if k != "link_type"}
    with pytest.raises(NetworkLoadError, match="link_type"):
        load_network(*_write_pair(tmp_path, NODES, [link]))


def test_load_ramp_alias(tmp_path):
    net = load_network(*_write_pair(tmp_path, NODES, [{**LINK, "link_type": "motorway_link"}]))
    assert net.links[10].link_type == "ramp"


def test_grid_fixture_round_trip(tmp_path, grid4):
    assert len(grid4.nodes) == 16 and len(grid4.links) == 48
    write_network(grid4, tmp_path / "node.csv", tmp_path / "link.csv")
    net = load_network(tmp_path / "node.csv", tmp_path / "link.csv")
    assert len(net.nodes) == 16 and len(net.links) == 48 and not net.rejections
    for lid, link in grid4.links.items():
        got = net.links[lid]
        assert (got.from_node, got.to_node, got.link_type, got.lanes, got.county, got.urban) == (
            link.from_node, link.to_node, link.link_type, link.lanes, link.county, link.urban,
        )
        assert got.speed_limit == pytest.approx(link.speed_limit)


def test_adjacency_consistent(grid4):
    for nid, out in grid4.adjacency.items():
        assert all(grid4.links[lid].from_node == nid for lid in out)
    assert sum(len(v) for v in grid4.adjacency.values()) == len(grid4.links)


def test_network_rejects_missing_node():
    with pytest.raises(ValueError):
        _net([replace(_link(1), to_node=7)])


def test_plane_helper_geometry():
    net = plane_network({1: (0, 0), 2: (100, 0)}, [(1, 1, 2)])
    assert net.direction(1) == pytest.approx(0.0, abs=1e-9)
    assert net.links[1].length == pytest.approx(100.0)

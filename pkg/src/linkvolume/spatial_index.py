"""Fixed-radius candidate retrieval over link geometric nodes."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .netmodel import GeoPoint, PlanePoint, RoadNetwork, unproject_arrays

DEFAULT_RADIUS_M = 100.0
DEFAULT_SPACING_M = 100.0

# the tree query is padded then filtered exactly, so boundary points agree with a linear scan
_RADIUS_PAD = 1e-9


class IndexedPoint(NamedTuple):
    position: PlanePoint
    link_id: int
    seq: int


class Neighbor(NamedTuple):
    distance: float
    point: IndexedPoint


def densify_geometry(net: RoadNetwork, max_spacing: float = DEFAULT_SPACING_M) -> RoadNetwork:
    """Insert vertices so no two consecutive geometry vertices are > ``max_spacing`` apart.

    The projection is affine in (lat, lon), so interpolating in the plane and
    mapping back keeps the new vertices on the original straight segments.
    """
    if max_spacing <= 0:
        raise ValueError("max_spacing must be positive")
    ref = net.projection_ref
    changed = {}
    for lid, link in net.links.items():
        xy = net.link_xy(lid)
        seg = np.hypot(*np.diff(xy, axis=0).T)
        pieces = np.maximum(1, np.ceil(seg / max_spacing - 1e-9)).astype(int)
        if (pieces == 1).all():
            continue
        out = [link.geometry[0]]
        for i, k in enumerate(pieces):
            if k > 1:
                t = np.arange(1, k) / k
                px = xy[i, 0] + t * (xy[i + 1, 0] - xy[i, 0])
                py = xy[i, 1] + t * (xy[i + 1, 1] - xy[i, 1])
                lat, lon = unproject_arrays(px, py, ref)
                out.extend(GeoPoint(float(a), float(b)) for a, b in zip(lat, lon))
            out.append(link.geometry[i + 1])
        changed[lid] = replace(link, geometry=tuple(out))
    if not changed:
        return net
    return net.with_links({lid: changed.get(lid, link) for lid, link in net.links.items()})


class SpatialIndex:
    """k-d tree over every geometry vertex of every link."""

    def __init__(self, xy: np.ndarray, link_ids: np.ndarray, seqs: np.ndarray):
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self.link_ids = np.asarray(link_ids, dtype=np.int64)
        self.seqs = np.asarray(seqs, dtype=np.int64)
        for arr in (self.xy, self.link_ids, self.seqs):
            arr.setflags(write=False)
        self._tree = cKDTree(self.xy) if len(self.xy) else None

    def __len__(self) -> int:
        return len(self.xy)

    def point(self, k: int) -> IndexedPoint:
        return IndexedPoint(PlanePoint(float(self.xy[k, 0]), float(self.xy[k, 1])), int(self.link_ids[k]), int(self.seqs[k]))

    def query_indices(self, x: float, y: float, r: float) -> list[tuple[float, int]]:
        """(distance, row) pairs within ``r`` sorted by (distance, link_id, seq)."""
        if self._tree is None:
            return []
        rows = self._tree.query_ball_point((x, y), r * (1.0 + _RADIUS_PAD) + _RADIUS_PAD)
        return self._finish(x, y, r, rows)

    def query_indices_many(self, xy: np.ndarray, r: float) -> list[list[tuple[float, int]]]:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if self._tree is None:
            return [[] for _ in range(len(xy))]
        found = self._tree.query_ball_point(xy, r * (1.0 + _RADIUS_PAD) + _RADIUS_PAD)
        return [self._finish(px, py, r, rows) for (px, py), rows in zip(xy.tolist(), found)]

    def _finish(self, x: float, y: float, r: float, rows) -> list[tuple[float, int]]:
        if not rows:
            return []
        rows = np.asarray(rows, dtype=np.int64)
        pts = self.xy[rows]
        d = np.hypot(pts[:, 0] - x, pts[:, 1] - y)
        keep = d <= r
        rows, d = rows[keep], d[keep]
        order = np.lexsort((self.seqs[rows], self.link_ids[rows], d))
        return list(zip(d[order].tolist(), rows[order].tolist()))


def build_index(net: RoadNetwork) -> SpatialIndex:
    xy, ids, seqs = [], [], []
    for lid in net.links:
        pts = net.link_xy(lid)
        xy.append(pts)
        ids.append(np.full(len(pts), lid, dtype=np.int64))
        seqs.append(np.arange(len(pts), dtype=np.int64))
    if not xy:
        return SpatialIndex(np.empty((0, 2)), np.empty(0), np.empty(0))
    return SpatialIndex(np.vstack(xy), np.concatenate(ids), np.concatenate(seqs))


def radius_query(idx: SpatialIndex, p: PlanePoint, r: float = DEFAULT_RADIUS_M) -> list[Neighbor]:
    if not r > 0:
        raise ValueError("radius must be positive")
    return [Neighbor(d, idx.point(k)) for d, k in idx.query_indices(p[0], p[1], r)]


@dataclass(frozen=True)
class SpacingStats:
    count: int
    mean: float
    share_within: float
    threshold: float
    median: float
    p95: float
    max: float


def consecutive_spacings(net: RoadNetwork) -> np.ndarray:
    parts = [np.hypot(*np.diff(net.link_xy(lid), axis=0).T) for lid in net.links]
    return np.concatenate(parts) if parts else np.empty(0)


def node_spacing_stats(net: RoadNetwork, threshold: float = DEFAULT_SPACING_M) -> SpacingStats:
    d = consecutive_spacings(net)
    if len(d) == 0:
        nan = math.nan
        return SpacingStats(0, nan, nan, threshold, nan, nan, nan)
    # tolerance absorbs round-off from the lat/lon round trip of inserted vertices
    within = float(np.mean(d <= threshold * (1.0 + 1e-9)))
    return SpacingStats(
        count=int(len(d)),
        mean=float(d.mean()),
        share_within=within,
        threshold=threshold,
        median=float(np.median(d)),
        p95=float(np.percentile(d, 95)),
        max=float(d.max()),
    )

"""Synthetic grid networks and GPS traces with recorded ground truth."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .calibrate import FeatureVector
from .netmodel import (
    KMH_TO_MPS,
    GeoPoint,
    Link,
    Node,
    RoadNetwork,
    Stratum,
    unproject_arrays,
)
from .router import Route, shortest_path
from .trips import ModeLabel, Sighting
from .volume import METERS_PER_MILE, LinkVolume

COUNTIES = ("24031", "24033")


@dataclass(frozen=True)
class SimConfig:
    rows: int = 4
    cols: int = 4
    edge_length: float = 100.0
    interval: float = 10.0
    noise_sigma: float = 10.0
    n_devices: int = 20
    trips_per_device: int = 1
    drive_share: float = 1.0
    dwell_s: float = 600.0
    seed: int = 0
    min_speed: float = 8.0
    max_speed: float = 25.0
    walk_min_speed: float = 1.0
    walk_max_speed: float = 1.8
    min_trip_m: float = 600.0
    origin_lat: float = 39.0
    origin_lon: float = -76.9
    start_t: float = 1_546_300_800.0
    expansion: float = 40.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise ValueError("grid needs at least 2 nodes")
        for name in ("edge_length", "interval", "n_devices", "trips_per_device", "min_speed", "max_speed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0 or self.dwell_s < 0:
            raise ValueError("noise_sigma and dwell_s must be non-negative")
        if not 0.0 <= self.drive_share <= 1.0:
            raise ValueError("drive_share must be within [0, 1]")

    @property
    def n_trips(self) -> int:
        return self.n_devices * self.trips_per_device


@dataclass(frozen=True)
class TruthTrip:
    device_id: str
    seq: int
    mode: ModeLabel
    links: tuple[int, ...]
    depart_t: float
    arrive_t: float
    speed: float


@dataclass
class GroundTruth:
    trips: list[TruthTrip]
    counts: Counter = field(default_factory=Counter)

    @classmethod
    def from_trips(cls, trips: Iterable[TruthTrip]) -> GroundTruth:
        trips = list(trips)
        return cls(trips, recount(trips))


def recount(trips: Iterable[TruthTrip]) -> Counter:
    counts: Counter = Counter()
    for tt in trips:
        if tt.mode is ModeLabel.DRIVE:
            counts.update(set(tt.links))
    return counts


def generate_network(cfg: SimConfig) -> RoadNetwork:
    """Bidirectional grid; perimeter links are motorway, interior primary/residential.

    West and east halves fall in two counties, the north half is urban.
    """
    ref = GeoPoint(cfg.origin_lat, cfg.origin_lon)
    e = cfg.edge_length
    nid = lambda r, c: r * cfg.cols + c + 1  # noqa: E731
    cx, cy = (cfg.cols - 1) / 2.0, (cfg.rows - 1) / 2.0
    nodes = {}
    for r in range(cfg.rows):
        for c in range(cfg.cols):
            lat, lon = unproject_arrays([(c - cx) * e], [(r - cy) * e], ref)
            nodes[nid(r, c)] = Node(nid(r, c), GeoPoint(float(lat[0]), float(lon[0])))

    edges = []
    for r in range(cfg.rows):
        for c in range(cfg.cols - 1):
            edges.append(((r, c), (r, c + 1), "row", r))
    for c in range(cfg.cols):
        for r in range(cfg.rows - 1):
            edges.append(((r, c), (r + 1, c), "col", c))

    links = {}
    lid = 1
    for a, b, axis, line in edges:
        last = cfg.rows - 1 if axis == "row" else cfg.cols - 1
        if line in (0, last):
            link_type, lanes, kmh = "motorway", 3, 105.0
        elif line % 3 == 0:
            link_type, lanes, kmh = "primary", 2, 64.0
        else:
            link_type, lanes, kmh = "residential", 1, 40.0
        mx = ((a[1] + b[1]) / 2.0 - cx) * e
        my = ((a[0] + b[0]) / 2.0 - cy) * e
        county = COUNTIES[0] if mx < 0 else COUNTIES[1]
        urban = my >= 0
        for u, v in ((a, b), (b, a)):
            fu, tv = nid(*u), nid(*v)
            links[lid] = Link(
                link_id=lid,
                from_node=fu,
                to_node=tv,
                geometry=(nodes[fu].position, nodes[tv].position),
                length=e,
                link_type=link_type,
                lanes=lanes,
                speed_limit=kmh * KMH_TO_MPS,
                county=county,
                urban=urban,
            )
            lid += 1
    return RoadNetwork(nodes, links, ref)


def _route_polyline(net: RoadNetwork, route: Sequence[int]) -> np.ndarray:
    parts = [net.link_xy(route[0])]
    for lid in route[1:]:
        parts.append(net.link_xy(lid)[1:])
    return np.vstack(parts)


def _positions_along(poly: np.ndarray, s: np.ndarray) -> np.ndarray:
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(poly, axis=0).T))])
    return np.column_stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])])


def _pick_destination(net, rng, origin, node_ids, min_trip_m):
    fallback = None
    for _ in range(200):
        dest = int(node_ids[rng.integers(len(node_ids))])
        if dest == origin:
            continue
        found = shortest_path(net, origin, dest)
        if found is None or not found[0]:
            continue
        if found[1] >= min_trip_m:
            return dest, found
        if fallback is None or found[1] > fallback[1][1]:
            fallback = (dest, found)
    if fallback is None:
        raise RuntimeError(f"no reachable destination from node {origin}")
    return fallback


def generate_trips(net: RoadNetwork, cfg: SimConfig) -> tuple[list[Sighting], GroundTruth]:
    """Random OD trips along shortest paths, sampled every ``cfg.interval`` s.

    Every device dwells at its start node and after each trip for
    ``cfg.dwell_s`` seconds, so consecutive trips are separable by dwell
    detection. Drive labels are assigned to exactly
    ``round(drive_share * n_trips)`` trips.
    """
    rng = np.random.default_rng(cfg.seed)
    ref = net.projection_ref
    node_ids = np.asarray(sorted(net.nodes))
    n_drive = int(round(cfg.drive_share * cfg.n_trips))
    is_drive = np.zeros(cfg.n_trips, dtype=bool)
    is_drive[rng.permutation(cfg.n_trips)[:n_drive]] = True
    dwell_sigma = min(cfg.noise_sigma, 3.0)

    sightings: list[Sighting] = []
    truth: list[TruthTrip] = []
    width = max(4, len(str(cfg.n_devices)))
    k_trip = 0
    for d in range(cfg.n_devices):
        dev = f"dev{d:0{width}d}"
        t = cfg.start_t + float(rng.uniform(0.0, 3600.0))
        node = int(node_ids[rng.integers(len(node_ids))])
        xs: list[np.ndarray] = []
        ts: list[np.ndarray] = []

        def dwell(at_node: int, t0: float) -> float:
            n = int(cfg.dwell_s // cfg.interval)
            if n <= 0:
                return t0
            p = np.asarray(net.node_xy(at_node))
            pts = p + rng.normal(0.0, dwell_sigma, size=(n, 2)) if dwell_sigma > 0 else np.tile(p, (n, 1))
            xs.append(pts)
            ts.append(t0 + cfg.interval * np.arange(1, n + 1))
            return t0 + cfg.interval * n

        t = dwell(node, t)
        for seq in range(cfg.trips_per_device):
            dest, (route, length) = _pick_destination(net, rng, node, node_ids, cfg.min_trip_m)
            drive = bool(is_drive[k_trip])
            k_trip += 1
            lo, hi = (cfg.min_speed, cfg.max_speed) if drive else (cfg.walk_min_speed, cfg.walk_max_speed)
            v = float(rng.uniform(lo, hi))
            duration = length / v
            steps = np.arange(0.0, duration, cfg.interval)
            tt = np.concatenate([steps, [duration]]) if duration - steps[-1] > 1e-9 else steps
            pts = _positions_along(_route_polyline(net, route), tt * v)
            if cfg.noise_sigma > 0:
                pts = pts + rng.normal(0.0, cfg.noise_sigma, size=pts.shape)
            depart = t + cfg.interval
            xs.append(pts)
            ts.append(depart + tt)
            arrive = depart + duration
            truth.append(
                TruthTrip(dev, seq, ModeLabel.DRIVE if drive else ModeLabel.NONMOTORIZED, tuple(route), depart, arrive, v)
            )
            t = dwell(dest, arrive)
            node = dest

        xy = np.vstack(xs)
        tv = np.concatenate(ts)
        lat, lon = unproject_arrays(xy[:, 0], xy[:, 1], ref)
        sightings.extend(
            Sighting(dev, float(ti), GeoPoint(float(a), float(b))) for ti, a, b in zip(tv.tolist(), lat.tolist(), lon.tolist())
        )
    return sightings, GroundTruth.from_trips(truth)


# --- scoring ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineScore:
    recall: float
    precision: float
    n_truth_trips: int
    n_routes: int
    n_assigned: int
    count_mae: float
    count_max_error: int
    count_errors: dict[int, int] = field(compare=False, repr=False, default_factory=dict)


def assign_routes(ground: GroundTruth, routes: Iterable[Route]) -> tuple[dict[int, list[Route]], list[Route]]:
    """Map each route to the truth trip of the same device it overlaps most in time.

    Returns the assignment and the routes that overlap no truth trip.
    """
    by_device: dict[str, list[int]] = {}
    for i, tt in enumerate(ground.trips):
        by_device.setdefault(tt.device_id, []).append(i)
    out: dict[int, list[Route]] = {}
    orphans: list[Route] = []
    for route in routes:
        best, best_overlap = None, 0.0
        for i in by_device.get(route.device_id, []):
            tt = ground.trips[i]
            overlap = min(tt.arrive_t, route.arrive_t) - max(tt.depart_t, route.depart_t)
            if overlap > best_overlap:
                best, best_overlap = i, overlap
        if best is None:
            orphans.append(route)
        else:
            out.setdefault(best, []).append(route)
    return out, orphans


def score_pipeline(
    ground: GroundTruth,
    routes: Sequence[Route],
    volumes: Sequence[LinkVolume] | None = None,
) -> PipelineScore:
    """Link-level recall/precision of valid routes against drive truth routes.

    Links of routes that cannot be assigned (or land on a non-drive truth
    trip) count as false positives. Count errors compare observed volumes
    (or counts recomputed from ``routes``) with truth counts on every link.
    """
    valid = [r for r in routes if r.valid]
    assigned, orphans = assign_routes(ground, valid)
    tp = fp = fn = 0
    n_assigned = 0
    for i, tt in enumerate(ground.trips):
        predicted = set()
        for route in assigned.get(i, []):
            predicted.update(route.links)
            n_assigned += 1
        if tt.mode is ModeLabel.DRIVE:
            true = set(tt.links)
            tp += len(predicted & true)
            fn += len(true - predicted)
            fp += len(predicted - true)
        else:
            fp += len(predicted)
    fp += sum(len(set(r.links)) for r in orphans)

    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0

    if volumes is not None:
        observed = {lv.link_id: lv.observed for lv in volumes}
    else:
        observed = Counter()
        for r in valid:
            observed.update(set(r.links))
    keys = set(observed) | set(ground.counts)
    errors = {lid: int(observed.get(lid, 0)) - int(ground.counts.get(lid, 0)) for lid in sorted(keys)}
    abs_err = [abs(v) for v in errors.values()]
    mae = float(np.mean(abs_err)) if abs_err else 0.0
    return PipelineScore(
        recall=recall,
        precision=precision,
        n_truth_trips=sum(tt.mode is ModeLabel.DRIVE for tt in ground.trips),
        n_routes=len(valid),
        n_assigned=n_assigned,
        count_mae=mae,
        count_max_error=max(abs_err) if abs_err else 0,
        count_errors=errors,
    )


# --- synthetic control totals and stations --------------------------------------------


def synthetic_avmt(net: RoadNetwork, ground: GroundTruth, cfg: SimConfig) -> dict[Stratum, float]:
    """Annual vehicle-miles per stratum implied by expanded truth counts (plus a floor)."""
    strata = net.strata()
    avmt: dict[Stratum, float] = {}
    for lid, link in net.links.items():
        daily = cfg.expansion * ground.counts.get(lid, 0) + 1.0
        avmt[strata[lid]] = avmt.get(strata[lid], 0.0) + daily * link.length / METERS_PER_MILE * 365.0
    return dict(sorted(avmt.items()))


def synthetic_aadt(net: RoadNetwork, ground: GroundTruth, cfg: SimConfig, share: float = 0.6) -> pd.DataFrame:
    rng = np.random.default_rng(cfg.seed + 1)
    ids = np.asarray(sorted(net.links))
    chosen = np.sort(rng.choice(ids, size=max(1, int(round(share * len(ids)))), replace=False))
    rows = []
    for lid in chosen.tolist():
        link = net.links[lid]
        base = cfg.expansion * ground.counts.get(lid, 0) * (1.0 + 0.1 * (link.lanes or 1)) + 50.0
        rows.append({"link_id": lid, "aadt": round(base * float(rng.lognormal(0.0, 0.1)), 3)})
    return pd.DataFrame(rows, columns=["link_id", "aadt"])


def generate_calibration_samples(
    n: int,
    seed: int = 0,
    noise_sd: float = 200.0,
) -> list[tuple[FeatureVector, float]]:
    """Samples with aadt = 2 * weighted * (1 + 0.1 * lanes) + Gaussian noise."""
    rng = np.random.default_rng(seed)
    types = ("motorway", "primary", "secondary", "tertiary", "residential", "ramp")
    lanes_by_type = {"motorway": (3, 4), "primary": (2, 3), "secondary": (2, 2), "tertiary": (1, 2), "residential": (1, 1), "ramp": (1, 2)}
    out = []
    for i in range(n):
        lt = types[int(rng.integers(len(types)))]
        lo, hi = lanes_by_type[lt]
        lanes = int(rng.integers(lo, hi + 1))
        weighted = float(rng.lognormal(7.0, 0.8))
        aadt = 2.0 * weighted * (1.0 + 0.1 * lanes) + float(rng.normal(0.0, noise_sd))
        fv = FeatureVector(
            link_id=i + 1,
            weighted_volume=weighted,
            lanes=lanes,
            speed_limit=30.0 if lt in ("motorway", "ramp") else 15.0,
            link_type=lt,
            county=COUNTIES[int(rng.integers(2))],
            urban=bool(rng.integers(2)),
        )
        out.append((fv, max(aadt, 1.0)))
    return out


# --- CSV ------------------------------------------------------------------------------


def write_ground_truth(ground: GroundTruth, trips_path: str | Path, counts_path: str | Path) -> None:
    pd.DataFrame(
        [
            {
                "device_id": tt.device_id,
                "seq": tt.seq,
                "mode": tt.mode.value,
                "depart_t": repr(tt.depart_t),
                "arrive_t": repr(tt.arrive_t),
                "speed": repr(tt.speed),
                "links": ";".join(map(str, tt.links)),
            }
            for tt in ground.trips
        ],
        columns=["device_id", "seq", "mode", "depart_t", "arrive_t", "speed", "links"],
    ).to_csv(trips_path, index=False)
    pd.DataFrame(sorted(ground.counts.items()), columns=["link_id", "count"]).to_csv(counts_path, index=False)


def read_ground_truth(trips_path: str | Path) -> GroundTruth:
    df = pd.read_csv(trips_path, dtype={"device_id": str, "links": str}, keep_default_na=False, float_precision="round_trip")
    trips = [
        TruthTrip(
            rec["device_id"],
            int(rec["seq"]),
            ModeLabel(rec["mode"]),
            tuple(int(v) for v in str(rec["links"]).split(";") if v),
            float(rec["depart_t"]),
            float(rec["arrive_t"]),
            float(rec["speed"]),
        )
        for rec in df.to_dict("records")
    ]
    return GroundTruth.from_trips(trips)

"""Device-partitioned matching and routing with associative result merging."""

from __future__ import annotations

import zlib
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

from .matcher import MatchOptions, match_trajectory
from .netmodel import RoadNetwork, impute_missing_attributes, load_network
from .router import Route, RouterOptions, is_connected_walk, route_trip
from .spatial_index import SpatialIndex, build_index, densify_geometry
from .trips import Sighting, filter_vehicle_trips, identify_trips, impute_mode


class InvariantViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class TripOptions:
    dwell_radius: float = 50.0
    dwell_time: float = 300.0
    min_span: float = 300.0


@dataclass(frozen=True)
class MatchContext:
    """Everything a worker needs; read-only after construction."""

    net: RoadNetwork
    index: SpatialIndex
    trip_opts: TripOptions = TripOptions()
    match_opts: MatchOptions = MatchOptions()
    router_opts: RouterOptions = RouterOptions()


@dataclass
class MatchStats:
    devices: int = 0
    sightings: int = 0
    trips: int = 0
    vehicle_trips: int = 0
    trip_sightings: int = 0
    matched_points: int = 0
    removed_sightings: int = 0
    invalid_routes: int = 0

    def __add__(self, other: MatchStats) -> MatchStats:
        return MatchStats(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    @property
    def matched_share(self) -> float:
        return self.matched_points / self.trip_sightings if self.trip_sightings else 0.0

    def summary(self) -> dict:
        return {**asdict(self), "matched_share": round(self.matched_share, 6)}


@dataclass
class PartitionResult:
    routes: list[Route] = field(default_factory=list)
    observed: Counter = field(default_factory=Counter)
    stats: MatchStats = field(default_factory=MatchStats)

    def merge(self, other: PartitionResult) -> PartitionResult:
        return PartitionResult(
            sorted(self.routes + other.routes, key=lambda r: r.trip_id),
            self.observed + other.observed,
            self.stats + other.stats,
        )


def prepare_network(node_file: str | Path, link_file: str | Path, densify_spacing: float = 100.0) -> tuple[RoadNetwork, SpatialIndex]:
    net = impute_missing_attributes(load_network(node_file, link_file))
    net = densify_geometry(net, densify_spacing)
    return net, build_index(net)


def process_device(stream: Sequence[Sighting], ctx: MatchContext) -> PartitionResult:
    to = ctx.trip_opts
    trips = identify_trips(stream, to.dwell_radius, to.dwell_time, to.min_span)
    trips = [replace(t, mode=impute_mode(t)) for t in trips]
    vehicle = filter_vehicle_trips(trips)
    out = PartitionResult()
    out.stats.devices = 1
    out.stats.sightings = len(stream)
    out.stats.trips = len(trips)
    out.stats.vehicle_trips = len(vehicle)
    for trip in vehicle:
        mt = match_trajectory(trip, ctx.index, ctx.net, ctx.match_opts)
        route = route_trip(mt, ctx.net, ctx.router_opts)
        if route.valid and not is_connected_walk(route.links, ctx.net):
            raise InvariantViolation(f"route for trip {trip.trip_id} is not a connected walk")
        out.stats.trip_sightings += len(trip.sightings)
        out.stats.matched_points += len(mt.points)
        out.stats.removed_sightings += route.removed_sightings
        out.stats.invalid_routes += not route.valid
        out.routes.append(route)
        if route.valid:
            out.observed.update(set(route.links))
    return out


def process_partition(streams: Sequence[Sequence[Sighting]], ctx: MatchContext | None = None) -> PartitionResult:
    ctx = ctx or _WORKER_CTX
    result = PartitionResult()
    for stream in streams:
        part = process_device(stream, ctx)
        result.routes.extend(part.routes)
        result.observed.update(part.observed)
        result.stats = result.stats + part.stats
    result.routes.sort(key=lambda r: r.trip_id)
    return result


def partition_key(device_id: str, n_partitions: int) -> int:
    return zlib.crc32(device_id.encode("utf-8")) % n_partitions


def make_partitions(streams: Mapping[str, Sequence[Sighting]], n_partitions: int) -> list[list[Sequence[Sighting]]]:
    parts: list[list[Sequence[Sighting]]] = [[] for _ in range(n_partitions)]
    for dev in sorted(streams):
        parts[partition_key(dev, n_partitions)].append(streams[dev])
    return parts


_WORKER_CTX: MatchContext | None = None


def _init_worker(ctx: MatchContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def run_partitions(
    streams: Mapping[str, Sequence[Sighting]],
    ctx: MatchContext,
    workers: int = 1,
    n_partitions: int | None = None,
) -> PartitionResult:
    """Process device streams by partition and reduce the partial results.

    The reduction is order-independent, so the result does not depend on
    ``workers`` or on how devices fall into partitions.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    n_partitions = n_partitions or max(1, 4 * workers)
    parts = [p for p in make_partitions(streams, n_partitions) if p]
    total = PartitionResult()
    if workers == 1 or len(parts) <= 1:
        partials = [process_partition(p, ctx) for p in parts]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as pool:
            partials = list(pool.map(process_partition, parts))
    for part in partials:
        total = total.merge(part)
    return total

"""Road network model: GMNS loading, plane projection, link directions, strata."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from statistics import median
from typing import Iterable, NamedTuple

import numpy as np
import pandas as pd
import shapely.wkt
from shapely.errors import ShapelyError

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_LANES = 1
DEFAULT_SPEED_MPS = 13.9
KMH_TO_MPS = 1000.0 / 3600.0
ENDPOINT_TOLERANCE_M = 1.0

HIGHWAY_TYPES = frozenset({"motorway", "trunk", "ramp"})
KNOWN_LINK_TYPES = frozenset(
    {
        "motorway",
        "trunk",
        "ramp",
        "primary",
        "secondary",
        "tertiary",
        "residential",
        "local",
        "unclassified",
        "living_street",
        "service",
        "connector",
    }
)


class NetworkLoadError(Exception):
    """Raised when a network file cannot be used at all."""


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"coordinates out of range: lat={self.lat}, lon={self.lon}")


class PlanePoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Node:
    node_id: int
    position: GeoPoint


class FunctionalClass(str, Enum):
    HIGHWAY = "highway"
    NON_HIGHWAY = "non_highway"


class Stratum(NamedTuple):
    county: str
    urban: bool
    functional_class: FunctionalClass

    def label(self) -> str:
        return f"{self.county}|{'urban' if self.urban else 'rural'}|{self.functional_class.value}"


@dataclass(frozen=True)
class Link:
    link_id: int
    from_node: int
    to_node: int
    geometry: tuple[GeoPoint, ...]
    length: float
    link_type: str
    lanes: int | None = None
    speed_limit: float | None = None
    county: str = "0"
    urban: bool = False


@dataclass(frozen=True)
class Rejection:
    row: int
    link_id: object
    reason: str


def project(p: GeoPoint, ref: GeoPoint) -> PlanePoint:
    """Local equirectangular projection of ``p`` about ``ref``, in meters."""
    x, y = project_arrays(np.asarray([p.lat]), np.asarray([p.lon]), ref)
    return PlanePoint(float(x[0]), float(y[0]))


def project_arrays(lat, lon, ref: GeoPoint) -> tuple[np.ndarray, np.ndarray]:
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    kx = EARTH_RADIUS_M * math.cos(math.radians(ref.lat))
    x = kx * np.radians(lon - ref.lon)
    y = EARTH_RADIUS_M * np.radians(lat - ref.lat)
    return x, y


def unproject(p: PlanePoint, ref: GeoPoint) -> GeoPoint:
    lat, lon = unproject_arrays(np.asarray([p.x]), np.asarray([p.y]), ref)
    return GeoPoint(float(lat[0]), float(lon[0]))


def unproject_arrays(x, y, ref: GeoPoint) -> tuple[np.ndarray, np.ndarray]:
    kx = EARTH_RADIUS_M * math.cos(math.radians(ref.lat))
    lat = ref.lat + np.degrees(np.asarray(y, dtype=float) / EARTH_RADIUS_M)
    lon = ref.lon + np.degrees(np.asarray(x, dtype=float) / kx)
    return lat, lon


def bearing(dx: float, dy: float) -> float:
    """Counterclockwise angle from +x in [0, 360)."""
    deg = math.degrees(math.atan2(dy, dx)) % 360.0
    # -0.0 and tiny negatives can round up to exactly 360.0
    return 0.0 if deg >= 360.0 else deg


def angular_difference(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def functional_class(link_type: str) -> FunctionalClass:
    if link_type in HIGHWAY_TYPES:
        return FunctionalClass.HIGHWAY
    return FunctionalClass.NON_HIGHWAY


def classify_stratum(link: Link) -> Stratum:
    if link.link_type not in KNOWN_LINK_TYPES:
        log.warning("unknown link_type %r on link %s; treating as non_highway", link.link_type, link.link_id)
    return Stratum(str(link.county), bool(link.urban), functional_class(link.link_type))


def normalize_link_type(raw: object) -> str:
    name = str(raw).strip().lower() if raw is not None and not _is_missing(raw) else "unclassified"
    if name.endswith("_link") or name in {"ramp", "motorway_link"}:
        return "ramp"
    return name


class RoadNetwork:
    """Directed routable graph; treated as immutable once constructed.

    Projected link geometry and directions are computed eagerly so the
    network can be shared read-only across worker processes.
    """

    def __init__(
        self,
        nodes: dict[int, Node],
        links: dict[int, Link],
        projection_ref: GeoPoint | None = None,
        rejections: Iterable[Rejection] = (),
    ):
        for link in links.values():
            if link.from_node not in nodes or link.to_node not in nodes:
                raise ValueError(f"link {link.link_id} references a missing node")
        self.nodes = dict(nodes)
        self.links = dict(sorted(links.items()))
        self.projection_ref = projection_ref or bbox_centroid(self.nodes.values())
        self.rejections = tuple(rejections)

        adjacency: dict[int, list[int]] = {nid: [] for nid in self.nodes}
        for link in self.links.values():
            adjacency[link.from_node].append(link.link_id)
        self.adjacency = {nid: tuple(ids) for nid, ids in adjacency.items()}

        self._strata: dict[int, Stratum] | None = None
        self._xy: dict[int, np.ndarray] = {}
        self._direction: dict[int, float] = {}
        for link in self.links.values():
            lat = [p.lat for p in link.geometry]
            lon = [p.lon for p in link.geometry]
            x, y = project_arrays(lat, lon, self.projection_ref)
            xy = np.column_stack([x, y])
            xy.setflags(write=False)
            self._xy[link.link_id] = xy
        for link in self.links.values():
            try:
                self._direction[link.link_id] = link_direction(link, self.projection_ref)
            except DegenerateGeometryError:
                self._direction[link.link_id] = float("nan")

    def __len__(self) -> int:
        return len(self.links)

    def link_xy(self, link_id: int) -> np.ndarray:
        return self._xy[link_id]

    def direction(self, link_id: int) -> float:
        return self._direction[link_id]

    def node_xy(self, node_id: int) -> PlanePoint:
        return project(self.nodes[node_id].position, self.projection_ref)

    def project(self, p: GeoPoint) -> PlanePoint:
        return project(p, self.projection_ref)

    def with_links(self, links: dict[int, Link]) -> RoadNetwork:
        return RoadNetwork(self.nodes, links, self.projection_ref, self.rejections)

    def strata(self) -> dict[int, Stratum]:
        if self._strata is None:
            self._strata = {lid: classify_stratum(link) for lid, link in self.links.items()}
        return self._strata


def bbox_centroid(nodes: Iterable[Node]) -> GeoPoint:
    lats = [n.position.lat for n in nodes]
    lons = [n.position.lon for n in nodes]
    if not lats:
        return GeoPoint(0.0, 0.0)
    return GeoPoint((min(lats) + max(lats)) / 2.0, (min(lons) + max(lons)) / 2.0)


def link_direction(link: Link, ref: GeoPoint) -> float:
    a = project(link.geometry[0], ref)
    b = project(link.geometry[-1], ref)
    dx, dy = b.x - a.x, b.y - a.y
    if dx == 0.0 and dy == 0.0:
        raise DegenerateGeometryError(f"link {link.link_id} has zero projected length")
    return bearing(dx, dy)


def polyline_length(xy: np.ndarray) -> float:
    if len(xy) < 2:
        return 0.0
    return float(np.hypot(*np.diff(xy, axis=0).T).sum())


def impute_missing_attributes(net: RoadNetwork) -> RoadNetwork:
    """Fill missing lanes/speed_limit with the median of stratum peers.

    Falls back to the same functional class network-wide, then to global
    defaults. Present values are never touched.
    """
    strata = net.strata()
    filled = {}
    for attr, default in (("lanes", DEFAULT_LANES), ("speed_limit", DEFAULT_SPEED_MPS)):
        by_stratum: dict[Stratum, list[float]] = {}
        by_class: dict[FunctionalClass, list[float]] = {}
        for lid, link in net.links.items():
            value = getattr(link, attr)
            if value is None:
                continue
            by_stratum.setdefault(strata[lid], []).append(value)
            by_class.setdefault(strata[lid].functional_class, []).append(value)
        filled[attr] = (by_stratum, by_class, default)

    links = {}
    for lid, link in net.links.items():
        updates = {}
        for attr, (by_stratum, by_class, default) in filled.items():
            if getattr(link, attr) is not None:
                continue
            peers = by_stratum.get(strata[lid]) or by_class.get(strata[lid].functional_class)
            value = median(peers) if peers else default
            if attr == "lanes":
                value = max(1, int(round(value)))
            updates[attr] = value
        links[lid] = replace(link, **updates) if updates else link
    return net.with_links(links)


# --- GMNS loading ---------------------------------------------------------------

_NODE_COLUMNS = {"node_id": ("node_id",), "lat": ("y_coord", "lat"), "lon": ("x_coord", "lon")}
_LINK_REQUIRED = ("link_id", "from_node_id", "to_node_id", "geometry", "length", "link_type")
_LINK_ALIASES = {"from_node_id": ("from_node_id", "from_node"), "to_node_id": ("to_node_id", "to_node")}


def _is_missing(value: object) -> bool:
    if value is None:
        return True
    if isinstance(value, float) and math.isnan(value):
        return True
    return isinstance(value, str) and value.strip() == ""


def _pick(columns: Iterable[str], options: tuple[str, ...], what: str, path: Path) -> str:
    cols = set(columns)
    for name in options:
        if name in cols:
            return name
    raise NetworkLoadError(f"{path}: missing required column {what!r} (accepted: {', '.join(options)})")


def _parse_bool(value: object) -> bool:
    if _is_missing(value):
        return False
    if isinstance(value, str):
        return value.strip().lower() in {"1", "true", "t", "yes", "y", "urban"}
    return bool(int(value))


def _parse_geometry(wkt: object, a: Node, b: Node) -> tuple[GeoPoint, ...]:
    if _is_missing(wkt):
        return (a.position, b.position)
    try:
        geom = shapely.wkt.loads(str(wkt))
    except ShapelyError as exc:
        raise ValueError(f"bad geometry: {exc}") from None
    if geom.geom_type != "LineString":
        raise ValueError(f"geometry must be LINESTRING, got {geom.geom_type}")
    coords = list(geom.coords)
    if len(coords) < 2:
        raise ValueError("geometry needs at least 2 vertices")
    return tuple(GeoPoint(float(c[1]), float(c[0])) for c in coords)


def load_network(node_file: str | Path, link_file: str | Path) -> RoadNetwork:
    """Load GMNS ``node.csv``/``link.csv`` into a validated :class:`RoadNetwork`.

    Bad rows are rejected and recorded on ``RoadNetwork.rejections``; a missing
    required column is fatal.
    """
    node_file, link_file = Path(node_file), Path(link_file)
    try:
        ndf = pd.read_csv(node_file, float_precision="round_trip")
        ldf = pd.read_csv(link_file, dtype={"county": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise NetworkLoadError(f"cannot read network files: {exc}") from exc

    ncols = {key: _pick(ndf.columns, opts, key, node_file) for key, opts in _NODE_COLUMNS.items()}
    nodes: dict[int, Node] = {}
    rejections: list[Rejection] = []
    for row, rec in enumerate(ndf.itertuples(index=False)):
        rec = rec._asdict()
        try:
            nid = int(rec[ncols["node_id"]])
            pos = GeoPoint(float(rec[ncols["lat"]]), float(rec[ncols["lon"]]))
        except (TypeError, ValueError) as exc:
            rejections.append(Rejection(row, None, f"node row invalid: {exc}"))
            continue
        if nid in nodes:
            rejections.append(Rejection(row, None, f"duplicate node_id {nid}"))
            continue
        nodes[nid] = Node(nid, pos)

    lcol = {}
    for name in _LINK_REQUIRED:
        lcol[name] = _pick(ldf.columns, _LINK_ALIASES.get(name, (name,)), name, link_file)
    has = set(ldf.columns)
    ref = bbox_centroid(nodes.values())

    links: dict[int, Link] = {}
    for row, rec in enumerate(ldf.to_dict("records")):
        raw_id = rec[lcol["link_id"]]
        try:
            link = _link_from_record(rec, lcol, has, nodes, ref)
        except (TypeError, ValueError) as exc:
            rejections.append(Rejection(row, raw_id, str(exc)))
            continue
        if link.link_id in links:
            rejections.append(Rejection(row, raw_id, "duplicate link_id"))
            continue
        links[link.link_id] = link

    for rej in rejections:
        log.warning("rejected %s row %d (link %s): %s", link_file.name, rej.row, rej.link_id, rej.reason)
    return RoadNetwork(nodes, links, ref, rejections)


def _link_from_record(rec, lcol, has, nodes, ref) -> Link:
    lid = int(rec[lcol["link_id"]])
    fn, tn = int(rec[lcol["from_node_id"]]), int(rec[lcol["to_node_id"]])
    if fn not in nodes or tn not in nodes:
        missing = [n for n in (fn, tn) if n not in nodes]
        raise ValueError(f"dangling node reference {missing}")
    if fn == tn:
        raise ValueError("from_node equals to_node")
    geometry = _parse_geometry(rec[lcol["geometry"]], nodes[fn], nodes[tn])
    for vertex, node in ((geometry[0], nodes[fn]), (geometry[-1], nodes[tn])):
        a, b = project(vertex, ref), project(node.position, ref)
        if math.hypot(a.x - b.x, a.y - b.y) > ENDPOINT_TOLERANCE_M:
            raise ValueError(f"geometry endpoint is not at node {node.node_id}")
    length = rec[lcol["length"]]
    if _is_missing(length):
        x, y = project_arrays([p.lat for p in geometry], [p.lon for p in geometry], ref)
        length = polyline_length(np.column_stack([x, y]))
    length = float(length)
    if not length > 0:
        raise ValueError(f"non-positive length {length}")

    lanes = rec.get("lanes") if "lanes" in has else None
    lanes = None if _is_missing(lanes) else int(lanes)
    if lanes is not None and lanes <= 0:
        lanes = None
    speed = None
    if "speed_limit" in has and not _is_missing(rec.get("speed_limit")):
        speed = float(rec["speed_limit"])
    elif "free_speed" in has and not _is_missing(rec.get("free_speed")):
        speed = float(rec["free_speed"]) * KMH_TO_MPS
    if speed is not None and speed <= 0:
        speed = None
    county = rec.get("county") if "county" in has else None
    county = "0" if _is_missing(county) else str(county).strip()
    urban = _parse_bool(rec.get("urban")) if "urban" in has else False

    return Link(
        link_id=lid,
        from_node=fn,
        to_node=tn,
        geometry=geometry,
        length=length,
        link_type=normalize_link_type(rec[lcol["link_type"]]),
        lanes=lanes,
        speed_limit=speed,
        county=county,
        urban=urban,
    )


def write_network(net: RoadNetwork, node_file: str | Path, link_file: str | Path) -> None:
    """Write the network in the same GMNS layout :func:`load_network` reads."""
    pd.DataFrame(
        [{"node_id": n.node_id, "x_coord": repr(n.position.lon), "y_coord": repr(n.position.lat)} for n in net.nodes.values()]
    ).to_csv(node_file, index=False)
    rows = []
    for link in net.links.values():
        coords = ", ".join(f"{p.lon!r} {p.lat!r}" for p in link.geometry)
        rows.append(
            {
                "link_id": link.link_id,
                "from_node_id": link.from_node,
                "to_node_id": link.to_node,
                "length": repr(link.length),
                "geometry": f"LINESTRING ({coords})",
                "link_type": link.link_type,
                "lanes": "" if link.lanes is None else link.lanes,
                "free_speed": "" if link.speed_limit is None else repr(link.speed_limit / KMH_TO_MPS),
                "county": link.county,
                "urban": int(link.urban),
            }
        )
    pd.DataFrame(rows, columns=[
        "link_id", "from_node_id", "to_node_id", "length", "geometry",
        "link_type", "lanes", "free_speed", "county", "urban",
    ]).to_csv(link_file, index=False)

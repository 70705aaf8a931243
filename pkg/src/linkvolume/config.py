"""Pipeline configuration: YAML file, environment and flag overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .simgen import SimConfig

WORKERS_ENV = "LINKVOLUME_WORKERS"
BASES = ("count", "vmt")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: str = "out"
    nodes: str | None = None
    links: str | None = None
    sightings: str | None = None
    avmt: str | None = None
    aadt: str | None = None
    sld: str | None = None
    truth: str | None = None

    dwell_radius: float = 50.0
    dwell_time: float = 300.0
    min_trip_span: float = 300.0
    search_radius: float = 100.0
    heading_gate: float = 30.0
    distance_mode: str = "segment"
    distance_excess: float = 2000.0
    max_speed: float = 50.0
    search_cap: float = 10_000.0
    densify_spacing: float = 100.0

    weighting_basis: str = "count"
    workers: int = 1
    partitions: int = 16
    seed: int = 0
    folds: int = 10
    test_share: float = 0.1
    rf_trees: tuple[int, ...] = (100, 300)
    rf_depths: tuple[int | None, ...] = (8, 16, None)
    rf_min_leaf: tuple[int, ...] = (1, 5, 20)
    debug_dump: bool = False

    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        for name in (
            "dwell_radius", "dwell_time", "min_trip_span", "search_radius", "heading_gate",
            "distance_excess", "max_speed", "search_cap", "densify_spacing",
        ):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.workers < 1 or self.partitions < 1:
            raise ConfigError("workers and partitions must be >= 1")
        if self.weighting_basis not in BASES:
            raise ConfigError(f"weighting_basis must be one of {BASES}")
        if self.distance_mode not in ("segment", "vertex"):
            raise ConfigError("distance_mode must be 'segment' or 'vertex'")
        if not 0.0 < self.test_share < 1.0:
            raise ConfigError("test_share must be within (0, 1)")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")

    def path(self, name: str, default_file: str) -> Path:
        value = getattr(self, name)
        return Path(value) if value else Path(self.output_dir) / default_file

    @property
    def grid(self) -> dict[str, list]:
        return {
            "n_estimators": list(self.rf_trees),
            "max_depth": list(self.rf_depths),
            "min_samples_leaf": list(self.rf_min_leaf),
        }

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def config_hash(self) -> str:
        """Hash of everything that can influence outputs (worker count excluded)."""
        d = self.to_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_PIPELINE_FIELDS = {f.name: f for f in fields(PipelineConfig) if f.name != "sim"}
_SIM_FIELDS = {f.name: f for f in fields(SimConfig)}


def _parse_depth(v):
    if v is None or (isinstance(v, str) and v.strip().lower() in {"none", "null", ""}):
        return None
    return int(v)


def coerce(name: str, value: Any, sim: bool = False) -> Any:
    """Convert a file or flag value into the type of config field ``name``."""
    if value is None:
        return None
    if sim:
        default = getattr(SimConfig(), name)
        return type(default)(value)
    if name in ("rf_trees", "rf_min_leaf", "rf_depths"):
        items = value.split(",") if isinstance(value, str) else list(value)
        conv = _parse_depth if name == "rf_depths" else int
        return tuple(conv(v) for v in items)
    default = getattr(PipelineConfig(), name)
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.strip().lower() in {"1", "true", "yes", "on"}
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def build_config(
    file: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    sim_overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Defaults < config file < environment (worker count) < explicit overrides."""
    env = os.environ if env is None else env
    data: dict[str, Any] = {}
    sim_data: dict[str, Any] = {}
    if file is not None:
        try:
            loaded = yaml.safe_load(Path(file).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {file}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{file}: top level must be a mapping")
        sim_data.update(loaded.pop("sim", None) or {})
        data.update(loaded)
    if env.get(WORKERS_ENV):
        data["workers"] = env[WORKERS_ENV]
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    sim_data.update({k: v for k, v in (sim_overrides or {}).items() if v is not None})

    unknown = sorted(set(data) - set(_PIPELINE_FIELDS)) + sorted(f"sim.{k}" for k in set(sim_data) - set(_SIM_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        sim = replace(SimConfig(), **{k: coerce(k, v, sim=True) for k, v in sim_data.items()})
        return PipelineConfig(**{k: coerce(k, v) for k, v in data.items()}, sim=sim)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

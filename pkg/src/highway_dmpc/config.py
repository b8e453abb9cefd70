"""Scenario configuration: JSON schema (versioned), validation and round-trip."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dmpc.config import OcpConfig
from .ego import EgoParams
from .hdv import DriverDistribution, DriverParams, HdvConfig
from .metrics import MetricsConfig
from .ovsp import FilterGains
from .road import RoadLink
from .rsa import RsaConfig

SCHEMA_VERSION = 1
PLANNERS = ("2d", "1d", "baseline")
ROAD_REQUIRED = ("length", "lane_count", "lane_width")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the dotted field name."""


@dataclass
class ScenarioParams:
    demand: float = 2000.0           # veh/h
    penetration: float = 1.0
    duration: float = 300.0          # s
    dt_s: float = 0.25               # s
    comm_range: float = 300.0        # m
    sensor_range: float = 150.0      # m
    seed: int = 0
    planner: str = "2d"
    max_vehicles: int | None = None  # stop spawning after this many arrivals
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0

    def __post_init__(self):
        if self.demand < 0:
            raise ValueError("demand must be >= 0")
        if not 0.0 <= self.penetration <= 1.0:
            raise ValueError("penetration must lie in [0, 1]")
        if self.duration <= 0 or self.dt_s <= 0:
            raise ValueError("duration and dt_s must be positive")
        if self.comm_range <= 0 or self.sensor_range <= 0:
            raise ValueError("ranges must be positive")
        if self.planner not in PLANNERS:
            raise ValueError(f"planner must be one of {PLANNERS}")
        if self.max_vehicles is not None and self.max_vehicles < 0:
            raise ValueError("max_vehicles must be >= 0")


@dataclass
class ScenarioConfig:
    road: RoadLink = field(default_factory=RoadLink)
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    ocp: OcpConfig = field(default_factory=OcpConfig)
    ego: EgoParams = field(default_factory=EgoParams)
    ovsp: FilterGains = field(default_factory=FilterGains)
    rsa: RsaConfig = field(default_factory=RsaConfig)
    hdv: HdvConfig = field(default_factory=HdvConfig)
    drivers: DriverDistribution = field(default_factory=DriverDistribution)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if self.scenario.dt_s > self.ocp.horizon_dt + 1e-12:
            raise ConfigError("scenario.dt_s: must not exceed ocp.horizon_dt")

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if f.name == "drivers":
                d = {k: v for k, v in dataclasses.asdict(section).items() if k != "base"}
                d["base"] = dataclasses.asdict(section.base)
                out[f.name] = d
            else:
                out[f.name] = {k: _plain(v) for k, v in dataclasses.asdict(section).items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, **scenario) -> "ScenarioConfig":
        d = self.to_dict()
        d["scenario"].update({k: v for k, v in scenario.items() if v is not None})
        return parse_config(d)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


SECTIONS = {
    "road": RoadLink,
    "scenario": ScenarioParams,
    "ocp": OcpConfig,
    "ego": EgoParams,
    "ovsp": FilterGains,
    "rsa": RsaConfig,
    "hdv": HdvConfig,
    "metrics": MetricsConfig,
}


def _build(name, cls, data, required=()):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
    for key in required:
        if key not in data:
            raise ConfigError(f"{name}.{key}: missing required field")
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        bad = next((k for k in kwargs if k in str(exc)), None)
        where = f"{name}.{bad}" if bad else name
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {version}")
    if "road" not in data:
        raise ConfigError("road: missing required section")
    for key in data:
        if key not in SECTIONS and key not in ("drivers", "schema_version"):
            raise ConfigError(f"{key}: unknown section")
    parts = {}
    for name, cls in SECTIONS.items():
        parts[name] = _build(name, cls, data.get(name, {}),
                             ROAD_REQUIRED if name == "road" else ())
    drv = dict(data.get("drivers", {}))
    base = _build("drivers.base", DriverParams, drv.pop("base", {}))
    parts["drivers"] = _build("drivers", DriverDistribution, {**drv, "base": base})
    _check_types(parts)
    return ScenarioConfig(**parts)


def _check_types(parts):
    sc = parts["scenario"]
    if not isinstance(sc.seed, int) or isinstance(sc.seed, bool):
        raise ConfigError("scenario.seed: must be an integer")
    road = parts["road"]
    if not isinstance(road.lane_count, int):
        raise ConfigError("road.lane_count: must be an integer")


def load_config(path) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from exc
    return parse_config(data)


def default_config(**scenario) -> ScenarioConfig:
    cfg = ScenarioConfig()
    return cfg.with_overrides(**scenario) if scenario else cfg

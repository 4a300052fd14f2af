"""Scenario configuration: dataclasses plus YAML loading and validation."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .auth import AuthConfig
from .consensus import ConsensusConfig, LinkModel
from .estimation import FilterConfig
from .trust import TrustConfig
from .world import (
    ConfigError,
    FaultSpec,
    NpcSpec,
    ParticipantSpec,
    WorldConfig,
    default_world_config,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "intersection"
    world: WorldConfig = field(default_factory=default_world_config)
    fault: FaultSpec | None = None
    horizon: float = 600.0
    round_period: float = 1.0
    inject_window: tuple[float, float] = (120.0, 540.0)
    consensus: ConsensusConfig = ConsensusConfig()
    link: LinkModel = LinkModel()
    trust: TrustConfig = TrustConfig()
    filter: FilterConfig = FilterConfig()
    auth: AuthConfig = AuthConfig()
    rsu_position: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.horizon <= 0 or self.round_period <= 0:
            raise ConfigError("horizon and round_period must be positive")
        lo, hi = self.inject_window
        if not 0 <= lo <= hi:
            raise ConfigError("inject_window must satisfy 0 <= lo <= hi")
        if self.consensus.sensing_timeout + self.consensus.aggregate_timeout >= self.round_period:
            raise ConfigError("consensus timeouts must fit inside one round period")
        if self.fault is not None:
            self.world.participant(self.fault.target)
            if self.fault.error_id in ("E10", "E11", "E12", "E13") and self.fault.magnitude != 1:
                raise ConfigError("communication faults take magnitude 1")

    def with_fault(self, fault: FaultSpec | None) -> "ScenarioConfig":
        return replace(self, fault=fault)

    def with_noise(self, participant: str, scale: float) -> "ScenarioConfig":
        parts = tuple(replace(p, noise_scale=scale) if p.id == participant else p for p in self.world.participants)
        self.world.participant(participant)
        return replace(self, world=replace(self.world, participants=parts))


# --------------------------------------------------------------------------
# dict -> dataclass


def _build(cls, data, where: str):
    if data is None:
        return None
    if dataclasses.is_dataclass(cls):
        if not isinstance(data, dict):
            raise ConfigError(f"{where}: expected a mapping")
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls) if f.init}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in data.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    origin = typing.get_origin(cls)
    args = typing.get_args(cls)
    if origin in (typing.Union, getattr(types, "UnionType", None)):
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], data, where)
    if origin is tuple:
        if not isinstance(data, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(data))
        if len(args) != len(data):
            raise ConfigError(f"{where}: expected {len(args)} items")
        return tuple(_build(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, data)))
    if cls is float:
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(data)
    if cls is int:
        if isinstance(data, bool) or not isinstance(data, int):
            raise ConfigError(f"{where}: expected an integer")
        return data
    if cls is str:
        if not isinstance(data, str):
            raise ConfigError(f"{where}: expected a string")
        return data
    if cls is bool:
        if not isinstance(data, bool):
            raise ConfigError(f"{where}: expected true/false")
        return data
    return data


_SECTIONS = {
    "consensus": ConsensusConfig,
    "link": LinkModel,
    "trust": TrustConfig,
    "filter": FilterConfig,
    "auth": AuthConfig,
}


def config_from_dict(doc: dict) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("scenario document must be a mapping")
    doc = dict(doc)
    version = doc.pop("schema", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {version}")
    world = default_world_config()
    if "world" in doc:
        w = dict(doc.pop("world") or {})
        parts = w.pop("participants", None)
        npcs = w.pop("npcs", None)
        world = _build(WorldConfig, {**w, "participants": []}, "world")
        world = replace(
            world,
            participants=tuple(_participant(p, i) for i, p in enumerate(parts))
            if parts is not None
            else default_world_config().participants,
            npcs=tuple(_build(NpcSpec, n, f"world.npcs[{i}]") for i, n in enumerate(npcs))
            if npcs is not None
            else default_world_config().npcs,
        )
    overrides = doc.pop("noise_scale", None) or {}
    kwargs = {"world": world}
    for key, cls in _SECTIONS.items():
        if key in doc:
            kwargs[key] = _build(cls, doc.pop(key) or {}, key)
    if "fault" in doc:
        kwargs["fault"] = _build(FaultSpec, doc.pop("fault"), "fault")
    for key in ("name", "horizon", "round_period", "inject_window", "rsu_position"):
        if key in doc:
            hints = typing.get_type_hints(ScenarioConfig)
            kwargs[key] = _build(hints[key], doc.pop(key), key)
    if doc:
        raise ConfigError(f"unknown top-level keys {sorted(doc)}")
    cfg = ScenarioConfig(**kwargs)
    for pid, scale in sorted(overrides.items()):
        cfg = cfg.with_noise(pid, float(scale))
    return cfg


def _participant(data, i: int) -> ParticipantSpec:
    where = f"world.participants[{i}]"
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    data = dict(data)
    data.setdefault("sensors", [])
    return _build(ParticipantSpec, data, where)


def load_config(path: str | Path) -> ScenarioConfig:
    """Read and validate a YAML scenario file; raises ConfigError."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(doc or {})


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Plain-data view, used to fingerprint runs."""
    return dataclasses.asdict(cfg)

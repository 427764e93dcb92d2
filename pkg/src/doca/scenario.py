"""Scenario configuration: resource pool, road geometry, channel and mobility.

Configurations are frozen dataclasses. They are built from plain nested
dicts (parsed YAML) by :func:`from_dict`, which fails closed on unknown
keys, and are checked by :func:`validate`.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

ENV_PREFIX = "DOCA_"

CHANNEL_VARIANTS = ("SCD", "MCD_RANGE", "MCD_SINR")
MOBILITY_POLICIES = ("CONSTANT_DENSITY", "EXP_REINSERT")
PATHLOSS_MODELS = ("winner_b1", "log_distance")
BUILTIN_NAMES = ("MCD", "MCD_NOFADE", "SCD_I", "SCD_II", "SCD_III")


class ConfigError(ValueError):
    """A configuration value violates an invariant; message starts with the field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ResourcePool:
    n_subframes: int
    n_subchannels: int

    @property
    def n_tbs(self) -> int:
        return self.n_subframes * self.n_subchannels

    def tb_index(self, subframe: int, subchannel: int) -> int:
        return subframe * self.n_subchannels + subchannel

    def tb_coords(self, tb: int) -> tuple[int, int]:
        """(subframe, subchannel) of a TB index."""
        return divmod(tb, self.n_subchannels)

    def subframe_of(self, tb: int) -> int:
        return tb // self.n_subchannels

    def hd_conflict(self, tb_a: int, tb_b: int) -> bool:
        return self.subframe_of(tb_a) == self.subframe_of(tb_b)


@dataclass(frozen=True)
class DocaGeometry:
    length: float = 500.0
    lanes_per_direction: int = 1
    lane_width: float = 4.0
    vehicle_length: float = 5.0

    @property
    def max_vehicles_per_direction(self) -> int:
        return int(math.floor(self.length / self.vehicle_length)) * self.lanes_per_direction


@dataclass(frozen=True)
class ChannelConfig:
    variant: str = "SCD"
    range_m: float = 120.0
    tx_power_dbm: float = 23.0
    pathloss: str = "winner_b1"
    antenna_height_m: float = 1.5
    carrier_ghz: float = 6.0
    min_distance_m: float = 3.0
    pathloss_exponent: float = 2.0  # log_distance fallback only
    shadow_sigma_db: float = 3.0
    decorrelation_m: float = 25.0
    noise_dbm: float = -95.0
    # None: calibrated so the median decoding range equals range_m
    sinr_threshold_db: float | None = None


@dataclass(frozen=True)
class MobilityConfig:
    policy: str = "CONSTANT_DENSITY"
    n: int = 10
    mean_offset_s: float = 2.5


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    geometry: DocaGeometry = field(default_factory=DocaGeometry)
    pool: ResourcePool = field(default_factory=lambda: ResourcePool(10, 2))
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    speed_mps: float = 50.0 / 3.6
    cam_period_ms: int = 100
    cam_size_bytes: int = 190
    headway_mean_s: float = 2.5
    prr_range_bins: tuple[tuple[float, float], ...] = ((0.0, 510.0),)
    prr_window_s: float = 10.0
    seed: int = 0

    @property
    def n_tbs(self) -> int:
        return self.pool.n_tbs

    @property
    def max_vehicles_per_direction(self) -> int:
        return self.geometry.max_vehicles_per_direction

    @property
    def prr_window_ms(self) -> int:
        return int(round(self.prr_window_s * 1000))

    @property
    def traversal_ms(self) -> float:
        return self.geometry.length / self.speed_mps * 1000.0

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {
    "geometry": DocaGeometry,
    "pool": ResourcePool,
    "channel": ChannelConfig,
    "mobility": MobilityConfig,
}


def _build(cls, data: Mapping[str, Any], path: str):
    if not isinstance(data, Mapping):
        raise ConfigError(path or "scenario", f"expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if cls is ScenarioConfig and key in _NESTED:
            value = _build(_NESTED[key], value, sub)
        elif key == "prr_range_bins":
            try:
                value = tuple((float(lo), float(hi)) for lo, hi in value)
            except (TypeError, ValueError):
                raise ConfigError(sub, "expected a list of [min, max] pairs") from None
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path or "scenario", str(exc)) from None


def from_dict(data: Mapping[str, Any]) -> ScenarioConfig:
    """Build and validate a config from a nested mapping."""
    return validate(_build(ScenarioConfig, data, ""))


def to_dict(config: ScenarioConfig) -> dict[str, Any]:
    out = dataclasses.asdict(config)
    out["prr_range_bins"] = [list(b) for b in config.prr_range_bins]
    return out


def _check_number(path: str, value: Any, *, integer: bool = False) -> None:
    kinds = (int,) if integer else (int, float)
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ConfigError(path, f"expected {'an integer' if integer else 'a number'}, got {value!r}")
    if not integer and not math.isfinite(value):
        raise ConfigError(path, "must be finite")


def validate(config: ScenarioConfig) -> ScenarioConfig:
    """Check every invariant; raises ConfigError naming the first violated field."""
    pool = config.pool
    _check_number("pool.n_subframes", pool.n_subframes, integer=True)
    _check_number("pool.n_subchannels", pool.n_subchannels, integer=True)
    if pool.n_subframes < 1:
        raise ConfigError("pool.n_subframes", "empty pool")
    if pool.n_subchannels < 1:
        raise ConfigError("pool.n_subchannels", "empty pool")

    geo = config.geometry
    for name in ("length", "lane_width", "vehicle_length"):
        _check_number(f"geometry.{name}", getattr(geo, name))
    _check_number("geometry.lanes_per_direction", geo.lanes_per_direction, integer=True)
    if geo.length <= 0:
        raise ConfigError("geometry.length", "must be > 0")
    if geo.vehicle_length <= 0:
        raise ConfigError("geometry.vehicle_length", "must be > 0")
    if geo.lane_width < 0:
        raise ConfigError("geometry.lane_width", "must be >= 0")
    if geo.lanes_per_direction != 1:
        raise ConfigError("geometry.lanes_per_direction", "only one lane per direction is modelled")
    if geo.max_vehicles_per_direction < 1:
        raise ConfigError("geometry.vehicle_length", "no vehicle fits the DOCA length")

    ch = config.channel
    if ch.variant not in CHANNEL_VARIANTS:
        raise ConfigError("channel.variant", f"must be one of {', '.join(CHANNEL_VARIANTS)}")
    if ch.pathloss not in PATHLOSS_MODELS:
        raise ConfigError("channel.pathloss", f"must be one of {', '.join(PATHLOSS_MODELS)}")
    for name in ("range_m", "tx_power_dbm", "antenna_height_m", "carrier_ghz", "min_distance_m",
                 "pathloss_exponent", "shadow_sigma_db", "decorrelation_m", "noise_dbm"):
        _check_number(f"channel.{name}", getattr(ch, name))
    if ch.range_m <= 0:
        raise ConfigError("channel.range_m", "must be > 0")
    if ch.shadow_sigma_db < 0:
        raise ConfigError("channel.shadow_sigma_db", "must be >= 0")
    if ch.decorrelation_m <= 0:
        raise ConfigError("channel.decorrelation_m", "must be > 0")
    if ch.min_distance_m <= 0:
        raise ConfigError("channel.min_distance_m", "must be > 0")
    if ch.pathloss == "winner_b1" and ch.antenna_height_m <= 1.0:
        raise ConfigError("channel.antenna_height_m", "effective height (h - 1 m) must be positive")
    if ch.sinr_threshold_db is not None:
        _check_number("channel.sinr_threshold_db", ch.sinr_threshold_db)

    mob = config.mobility
    if mob.policy not in MOBILITY_POLICIES:
        raise ConfigError("mobility.policy", f"must be one of {', '.join(MOBILITY_POLICIES)}")
    _check_number("mobility.n", mob.n, integer=True)
    _check_number("mobility.mean_offset_s", mob.mean_offset_s)
    if mob.n < 1:
        raise ConfigError("mobility.n", "must be >= 1")
    if mob.n > 2 * geo.max_vehicles_per_direction:
        raise ConfigError("mobility.n", "exceeds what fits in both directions")
    if mob.mean_offset_s < 0:
        raise ConfigError("mobility.mean_offset_s", "must be >= 0")

    _check_number("speed_mps", config.speed_mps)
    if config.speed_mps <= 0:
        raise ConfigError("speed_mps", "must be > 0")
    _check_number("cam_period_ms", config.cam_period_ms, integer=True)
    if config.cam_period_ms < pool.n_subframes:
        raise ConfigError("cam_period_ms", "must be at least the pool length (n_subframes ms)")
    _check_number("cam_size_bytes", config.cam_size_bytes, integer=True)
    _check_number("headway_mean_s", config.headway_mean_s)
    if config.headway_mean_s <= 0:
        raise ConfigError("headway_mean_s", "must be > 0")

    bins = config.prr_range_bins
    if not bins:
        raise ConfigError("prr_range_bins", "must be non-empty")
    prev_hi = -math.inf
    for i, (lo, hi) in enumerate(bins):
        if not (0 <= lo < hi):
            raise ConfigError(f"prr_range_bins[{i}]", "need 0 <= min < max")
        if lo < prev_hi:
            raise ConfigError(f"prr_range_bins[{i}]", "bins must be sorted and non-overlapping")
        prev_hi = hi
    _check_number("prr_window_s", config.prr_window_s)
    if config.prr_window_ms < 1:
        raise ConfigError("prr_window_s", "must be at least 1 ms")
    _check_number("seed", config.seed, integer=True)
    if config.seed < 0:
        raise ConfigError("seed", "must be unsigned")
    return config


def apply_env_overrides(data: dict[str, Any], environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Override config keys from ``DOCA_<KEY>`` variables; nested keys use ``__``.

    ``DOCA_POOL__N_SUBFRAMES=5`` sets ``pool.n_subframes``. Values are parsed as
    YAML scalars. Variables that do not name a config key are ignored.
    """
    environ = os.environ if environ is None else environ
    out = {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in data.items()}
    for var, raw in sorted(environ.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        parts = var[len(ENV_PREFIX):].lower().split("__")
        if len(parts) == 1 and parts[0] in {f.name for f in dataclasses.fields(ScenarioConfig)}:
            out[parts[0]] = yaml.safe_load(raw)
        elif len(parts) == 2 and parts[0] in _NESTED:
            if parts[1] in {f.name for f in dataclasses.fields(_NESTED[parts[0]])}:
                out.setdefault(parts[0], {})[parts[1]] = yaml.safe_load(raw)
    return out


def load(path: str | Path, environ: Mapping[str, str] | None = None) -> ScenarioConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return from_dict(apply_env_overrides(data, environ))


def dump(config: ScenarioConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(config), fh, sort_keys=False)


def builtin_path(name: str) -> Path:
    key = name.upper().replace("-", "_")
    if key not in BUILTIN_NAMES:
        raise ConfigError("scenario", f"unknown built-in {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
    return Path(str(resources.files("doca") / "scenarios" / f"{key.lower()}.yaml"))


def builtin_scenario(name: str, environ: Mapping[str, str] | None = None) -> ScenarioConfig:
    """One of the five shipped scenarios (MCD, MCD_NOFADE, SCD_I, SCD_II, SCD_III)."""
    return load(builtin_path(name), environ=environ if environ is not None else {})


def resolve_scenario(name_or_path: str, environ: Mapping[str, str] | None = None) -> ScenarioConfig:
    """Accept a built-in name (case-insensitive, '-' or '_') or a YAML file path."""
    if name_or_path.upper().replace("-", "_") in BUILTIN_NAMES:
        return load(builtin_path(name_or_path), environ)
    if not Path(name_or_path).is_file():
        raise ConfigError("scenario", f"{name_or_path!r} is neither a built-in ({', '.join(BUILTIN_NAMES)}) nor a file")
    try:
        return load(name_or_path, environ)
    except yaml.YAMLError as exc:
        raise ConfigError("scenario", f"cannot parse {name_or_path}: {exc}") from None

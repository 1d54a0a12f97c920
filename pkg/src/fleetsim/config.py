"""Scenario configuration: YAML parsing, defaults, cross-reference validation."""
from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .autoscaler import ScalerConfig
from .cluster import DEFAULT_PROFILES, AdapterSpec, GpuProfile, profile_from_dict
from .gateway import POLICIES
from .workload import SynthSpec


class ConfigError(ValueError):
    """Scenario configuration is invalid."""


def _check_bools(obj, where):
    for f in dataclasses.fields(obj):
        if f.type in ("bool", bool) and not isinstance(getattr(obj, f.name), bool):
            raise ConfigError(f"{where}.{f.name}: expected true or false")
    return obj


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        obj = cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return _check_bools(obj, where)


def _edges(v):
    return tuple(math.inf if (isinstance(e, str) and e.lower() in ("inf", "+inf")) else float(e)
                 for e in v)


@dataclass
class Deployment:
    name: str
    gpu: str
    replicas: int = 1
    model: str = "base"
    min_replicas: Optional[int] = None
    max_replicas: Optional[int] = None


@dataclass
class EngineConfig:
    prefix_caching: bool = True
    chunked_prefill: bool = False
    chunk_size: int = 512
    prefix_cache_tokens: Optional[int] = None   # default: the profile's kv_capacity

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")


@dataclass
class PoolConfig:
    enabled: bool = False
    policy: str = "2q"
    capacity_tokens: int = 1_000_000
    probation_tokens: int = 100_000
    bandwidth: float = 200_000.0   # tokens / s
    rtt: float = 0.002

    def __post_init__(self):
        if self.policy not in ("2q", "lru"):
            raise ValueError(f"unknown pool policy {self.policy!r}")


@dataclass
class GatewayConfig:
    policy: str = "random"
    prefix_threshold: float = 0.5
    fallback: str = "least-request"
    stats_window: float = 30.0
    overload_factor: float = 2.0
    rate_limits: Optional[dict] = None
    decision_log: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown routing policy {self.policy!r}")
        if self.stats_window <= 0:
            raise ValueError("stats_window must be > 0")


@dataclass
class OptimizerConfig:
    enabled: bool = False
    mode: str = "online"               # "online" (periodic) or "static" (plan once from the trace)
    edges_in: tuple = (200, 1000, math.inf)
    edges_out: tuple = (100, 500, math.inf)
    interval: float = 300.0
    capacity_table: Optional[str] = None
    headroom: float = 1.0
    max_per_type: Optional[int] = None

    def __post_init__(self):
        self.edges_in = _edges(self.edges_in)
        self.edges_out = _edges(self.edges_out)
        if self.mode not in ("online", "static"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if not 0 < self.headroom <= 1:
            raise ValueError("headroom must be in (0, 1]")


@dataclass
class SloConfig:
    metric: str = "ttft"
    value: float = math.inf

    def __post_init__(self):
        if self.metric not in ("ttft", "e2e"):
            raise ValueError("slo metric must be 'ttft' or 'e2e'")
        self.value = float(self.value)
        if self.value <= 0:
            raise ValueError("slo value must be > 0")


@dataclass
class FaultSpec:
    time: float
    mode: str = "crash"
    instance: Optional[int] = None
    gpu_type: Optional[str] = None
    factor: float = 0.5

    def __post_init__(self):
        if self.mode not in ("crash", "degrade"):
            raise ValueError(f"unknown fault mode {self.mode!r}")
        if (self.instance is None) == (self.gpu_type is None):
            raise ValueError("a fault names exactly one of 'instance' or 'gpu_type'")
        if self.mode == "degrade" and not 0 < self.factor < 1:
            raise ValueError("degrade factor must be in (0, 1)")


@dataclass
class AdapterConfig:
    name: str
    base_model: str = "base"
    load_time: float = 0.0
    copies: int = 1
    strategy: str = "least-adapters"

    def spec(self) -> AdapterSpec:
        return AdapterSpec(self.name, self.base_model, self.load_time)


@dataclass
class AdapterEvent:
    time: float
    action: str
    name: str
    base_model: str = "base"
    load_time: float = 0.0
    strategy: str = "least-adapters"

    def __post_init__(self):
        if self.action not in ("register", "unregister"):
            raise ValueError(f"unknown adapter action {self.action!r}")


@dataclass
class WorkloadConfig:
    trace: Optional[str] = None
    format: str = "jsonl-tokens"
    synth: Optional[dict] = None
    vocab: int = 32000


@dataclass
class OutputConfig:
    dir: Optional[str] = None
    decisions: bool = False
    records_csv: bool = True


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    block_size: int = 16
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    deployments: list = field(default_factory=list)
    engine: EngineConfig = field(default_factory=EngineConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    scaler: Optional[ScalerConfig] = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    slo: SloConfig = field(default_factory=SloConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    faults: list = field(default_factory=list)
    adapters: list = field(default_factory=list)
    adapter_events: list = field(default_factory=list)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, p: Optional[str]) -> Optional[Path]:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def synth_spec(self) -> Optional[SynthSpec]:
        if self.workload.synth is None:
            return None
        d = dict(self.workload.synth)
        if d.get("seed") is None:
            d["seed"] = self.seed
        return SynthSpec.from_config(d)

    def validate(self) -> None:
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if not self.deployments:
            raise ConfigError("deployments: at least one deployment is required")
        seen = set()
        for d in self.deployments:
            if d.name in seen:
                raise ConfigError(f"deployments: duplicate name {d.name!r}")
            seen.add(d.name)
            if d.gpu not in self.profiles:
                raise ConfigError(f"deployment {d.name}: unknown GPU profile {d.gpu!r}")
            if d.replicas < 0:
                raise ConfigError(f"deployment {d.name}: replicas must be >= 0")
        w = self.workload
        if (w.trace is None) == (w.synth is None):
            raise ConfigError("workload: give exactly one of 'trace' or 'synth'")
        if w.trace is not None:
            path = self.resolve(w.trace)
            if not path.exists():
                raise ConfigError(f"workload: trace file not found: {path}")
            if w.format not in ("jsonl-tokens", "jsonl-lengths"):
                raise ConfigError(f"workload: unknown trace format {w.format!r}")
        else:
            try:
                self.synth_spec()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"workload.synth: {exc}") from None
        models = {d.model for d in self.deployments}
        for a in self.adapters:
            if a.base_model not in models:
                raise ConfigError(f"adapter {a.name}: base model {a.base_model!r} not deployed")
            if a.strategy not in ("least-adapters", "binpack"):
                raise ConfigError(f"adapter {a.name}: unknown strategy {a.strategy!r}")
        for f in self.faults:
            if f.gpu_type is not None and f.gpu_type not in {d.gpu for d in self.deployments}:
                raise ConfigError(f"fault at t={f.time}: no deployment uses {f.gpu_type!r}")
            if f.instance is not None:
                initial = sum(d.replicas for d in self.deployments)
                if not 0 <= f.instance < initial:
                    raise ConfigError(f"fault at t={f.time}: unknown instance {f.instance}")
        if self.optimizer.enabled:
            gpus = [d.gpu for d in self.deployments]
            if len(gpus) != len(set(gpus)):
                raise ConfigError("optimizer: needs exactly one deployment per GPU type")
            if self.optimizer.capacity_table is not None:
                path = self.resolve(self.optimizer.capacity_table)
                if not path.exists():
                    raise ConfigError(f"optimizer: capacity table not found: {path}")


def scenario_from_dict(data: dict, base_dir=None) -> ScenarioConfig:
    data = copy.deepcopy(data or {})
    allowed = {f.name for f in dataclasses.fields(ScenarioConfig)} - {"base_dir"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    cfg = ScenarioConfig()
    cfg.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    cfg.name = str(data.get("name", cfg.name))
    cfg.seed = int(data.get("seed", 0))
    cfg.block_size = int(data.get("block_size", 16))
    profiles = dict(DEFAULT_PROFILES)
    for name, pd in (data.get("profiles") or {}).items():
        try:
            profiles[name] = profile_from_dict(name, pd)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"profiles.{name}: {exc}") from None
    cfg.profiles = profiles
    cfg.deployments = [_build(Deployment, d, f"deployments[{i}]")
                       for i, d in enumerate(data.get("deployments") or [])]
    cfg.engine = _build(EngineConfig, data.get("engine"), "engine")
    cfg.pool = _build(PoolConfig, data.get("pool"), "pool")
    cfg.gateway = _build(GatewayConfig, data.get("gateway"), "gateway")
    if data.get("scaler") is not None:
        cfg.scaler = _build(ScalerConfig, data["scaler"], "scaler")
    cfg.optimizer = _build(OptimizerConfig, data.get("optimizer"), "optimizer")
    cfg.slo = _build(SloConfig, data.get("slo"), "slo")
    cfg.workload = _build(WorkloadConfig, data.get("workload"), "workload")
    cfg.faults = [_build(FaultSpec, f, f"faults[{i}]") for i, f in enumerate(data.get("faults") or [])]
    cfg.adapters = [_build(AdapterConfig, a, f"adapters[{i}]")
                    for i, a in enumerate(data.get("adapters") or [])]
    cfg.adapter_events = [_build(AdapterEvent, a, f"adapter_events[{i}]")
                          for i, a in enumerate(data.get("adapter_events") or [])]
    cfg.output = _build(OutputConfig, data.get("output"), "output")
    cfg.validate()
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _read_yaml(path: Path, seen=()) -> dict:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = data.pop("base", None)
    if base is None:
        return data
    base_path = (path.parent / base).resolve()
    if base_path in seen:
        raise ConfigError(f"{path}: circular 'base' reference")
    # base paths inside the parent resolve against the parent's directory
    return _merge(_read_yaml(base_path, seen + (base_path,)), data)


def load_scenario(path, overrides: Optional[dict] = None) -> ScenarioConfig:
    """Load a scenario file.  A top-level ``base: other.yaml`` key loads that
    file first and deep-merges this one over it."""
    path = Path(path)
    data = _read_yaml(path, (path.resolve(),))
    apply_overrides(data, overrides or {})
    return scenario_from_dict(data, base_dir=path.parent)


def apply_overrides(data: dict, overrides: dict) -> dict:
    """CLI overrides: ``policy``, ``scaler`` (algorithm or ``none``), ``seed``, ``out``."""
    if overrides.get("policy"):
        data.setdefault("gateway", {})
        data["gateway"] = dict(data["gateway"] or {}, policy=overrides["policy"])
    if overrides.get("scaler"):
        if overrides["scaler"] == "none":
            data["scaler"] = None
        else:
            data["scaler"] = dict(data.get("scaler") or {}, algorithm=overrides["scaler"])
    if overrides.get("seed") is not None:
        data["seed"] = int(overrides["seed"])
        wl = data.get("workload") or {}
        if wl.get("synth") is not None:
            wl["synth"] = dict(wl["synth"], seed=int(overrides["seed"]))
    if overrides.get("out"):
        data["output"] = dict(data.get("output") or {}, dir=str(overrides["out"]))
    return data


def load_profiles(path) -> dict:
    """GPU profile file: a mapping ``name -> profile fields`` (optionally under ``profiles:``)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"profiles file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    data = data.get("profiles", data)
    out = {}
    for name, pd in data.items():
        try:
            out[name] = pd if isinstance(pd, GpuProfile) else profile_from_dict(name, pd)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"profiles.{name}: {exc}") from None
    return out

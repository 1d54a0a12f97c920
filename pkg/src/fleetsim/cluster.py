"""GPU profiles, per-instance serving state, cost, and LoRA adapter placement."""
from __future__ import annotations

import dataclasses
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

logger = logging.getLogger(__name__)

STARTING, READY, FAILED, REMOVED = "starting", "ready", "failed", "removed"


class PlacementError(RuntimeError):
    """No instance can take the adapter."""


@dataclass(frozen=True)
class GpuProfile:
    name: str
    prefill_rate: float          # tokens / s
    decode_base_itl: float       # s / token at batch 1
    batch_capacity: int
    itl_slope: float
    kv_capacity: int             # tokens
    hourly_cost: float
    max_adapters: int = 8

    def __post_init__(self):
        for f in ("prefill_rate", "decode_base_itl", "batch_capacity", "kv_capacity",
                  "hourly_cost", "max_adapters"):
            if getattr(self, f) <= 0:
                raise ValueError(f"GpuProfile {self.name}: {f} must be > 0")
        if self.itl_slope < 0:
            raise ValueError(f"GpuProfile {self.name}: itl_slope must be >= 0")

    def degraded(self, factor: float) -> "GpuProfile":
        return dataclasses.replace(self, prefill_rate=self.prefill_rate * factor,
                                   decode_base_itl=self.decode_base_itl / factor)


# Desk-scale stand-ins, tuned so that short requests are cheaper per
# req/s on the A10 and long ones on the L20.  Values are configuration, not
# measurements.
DEFAULT_PROFILES = {
    "A10": GpuProfile("A10", prefill_rate=4000.0, decode_base_itl=0.025, batch_capacity=16,
                      itl_slope=1.0, kv_capacity=12000, hourly_cost=1.0, max_adapters=8),
    "L20": GpuProfile("L20", prefill_rate=12000.0, decode_base_itl=0.02, batch_capacity=32,
                      itl_slope=1.5, kv_capacity=64000, hourly_cost=2.4, max_adapters=16),
}


def profile_from_dict(name: str, d: dict) -> GpuProfile:
    fields = {f.name for f in dataclasses.fields(GpuProfile)} - {"name"}
    unknown = set(d) - fields
    if unknown:
        raise ValueError(f"profile {name}: unknown fields {sorted(unknown)}")
    return GpuProfile(name=name, **d)


def prefill_time(gpu: GpuProfile, uncached_tokens: int) -> float:
    if uncached_tokens < 0:
        raise ValueError("uncached_tokens must be >= 0")
    return uncached_tokens / gpu.prefill_rate


def decode_step_time(gpu: GpuProfile, batch: int) -> float:
    if not 1 <= batch <= gpu.batch_capacity:
        raise ValueError(f"batch {batch} outside [1, {gpu.batch_capacity}]")
    return gpu.decode_base_itl * (1.0 + gpu.itl_slope * (batch - 1) / gpu.batch_capacity)


def cost_rate(plan, profiles) -> float:
    """Hourly cost of ``plan`` (a mapping or an object with ``counts``)."""
    counts = getattr(plan, "counts", plan)
    total = 0.0
    for g, n in counts.items():
        if g not in profiles:
            raise KeyError(f"unknown GPU type {g!r}")
        total += n * profiles[g].hourly_cost
    return total


@dataclass(frozen=True)
class AdapterSpec:
    name: str
    base_model: str
    load_time: float = 0.0


@dataclass
class Instance:
    """One serving replica and its queues.

    ``queue`` holds routed requests waiting for KV/batch admission,
    ``prefilling`` those admitted but without a first token yet, and
    ``running`` those decoding.
    """

    id: int
    gpu: GpuProfile
    model: str
    deployment: str
    local_cache: object = None
    health: str = READY
    ready_at: float = 0.0
    created_at: float = 0.0
    removed_at: Optional[float] = None
    draining: bool = False
    degrade: float = 1.0
    adapters: set = field(default_factory=set)
    loading: set = field(default_factory=set)
    queue: deque = field(default_factory=deque)
    prefilling: list = field(default_factory=list)
    running: list = field(default_factory=list)
    kv_used: int = 0
    busy: bool = False
    epoch: int = 0

    def __post_init__(self):
        self._eff = self.gpu

    @property
    def effective_gpu(self) -> GpuProfile:
        return self._eff

    def set_degrade(self, factor: float) -> None:
        if not 0 < factor <= 1:
            raise ValueError("degrade factor must be in (0, 1]")
        self.degrade = factor
        self._eff = self.gpu.degraded(factor) if factor != 1.0 else self.gpu

    @property
    def routable(self) -> bool:
        return self.health == READY and not self.draining

    @property
    def inflight(self) -> int:
        return len(self.queue) + len(self.prefilling) + len(self.running)

    @property
    def active(self) -> int:
        return len(self.prefilling) + len(self.running)

    @property
    def kv_free(self) -> int:
        return self.gpu.kv_capacity - self.kv_used

    def check(self) -> None:
        if self.kv_used < 0 or self.kv_used > self.gpu.kv_capacity:
            raise AssertionError(f"instance {self.id}: kv_used {self.kv_used} out of bounds")
        if self.active > self.gpu.batch_capacity:
            raise AssertionError(f"instance {self.id}: batch {self.active} over capacity")
        if len(self.adapters) + len(self.loading) > self.gpu.max_adapters:
            raise AssertionError(f"instance {self.id}: adapter density exceeded")


class Fleet:
    """Instances plus the adapter registry."""

    def __init__(self):
        self.instances: dict = {}
        self.adapters: dict = {}
        self._next_id = 0

    def add_instance(self, gpu: GpuProfile, model: str, deployment: str, now: float = 0.0,
                     ready_at: Optional[float] = None, local_cache=None) -> Instance:
        ready_at = now if ready_at is None else ready_at
        inst = Instance(
            id=self._next_id, gpu=gpu, model=model, deployment=deployment,
            local_cache=local_cache, health=READY if ready_at <= now else STARTING,
            ready_at=ready_at, created_at=now,
        )
        self.instances[inst.id] = inst
        self._next_id += 1
        return inst

    def live(self):
        return [i for i in self.instances.values() if i.health in (READY, STARTING)]

    def holders(self, adapter: str) -> list:
        return sorted(i.id for i in self.instances.values()
                      if adapter in i.adapters and i.health == READY)

    def register_adapter(self, adapter: AdapterSpec, strategy: str = "least-adapters",
                         now: float = 0.0, exclude=()) -> tuple:
        """Pick an instance for ``adapter``; returns ``(instance_id, ready_at)``.

        The caller completes the load with :meth:`finish_adapter_load` once
        ``load_time`` has elapsed.
        """
        if strategy not in ("least-adapters", "binpack"):
            raise ValueError(f"unknown placement strategy {strategy!r}")
        self.adapters[adapter.name] = adapter
        options = [
            i for i in self.instances.values()
            if i.health == READY and not i.draining and i.model == adapter.base_model
            and adapter.name not in i.adapters and adapter.name not in i.loading
            and len(i.adapters) + len(i.loading) < i.gpu.max_adapters
            and i.id not in exclude
        ]
        if not options:
            raise PlacementError(f"no instance has adapter headroom for {adapter.name!r}")
        if strategy == "least-adapters":
            target = min(options, key=lambda i: (len(i.adapters) + len(i.loading), i.id))
        else:
            target = min(options, key=lambda i: (-(len(i.adapters) + len(i.loading)), i.id))
        target.loading.add(adapter.name)
        return target.id, now + adapter.load_time

    def finish_adapter_load(self, name: str, instance_id: int) -> bool:
        inst = self.instances[instance_id]
        if name not in inst.loading:
            return False
        inst.loading.discard(name)
        if name not in self.adapters or inst.health != READY:
            return False
        inst.adapters.add(name)
        return True

    def unregister_adapter(self, name: str) -> None:
        if name not in self.adapters:
            logger.warning("unregister of unknown adapter %r ignored", name)
            return
        del self.adapters[name]
        for inst in self.instances.values():
            inst.adapters.discard(name)
            inst.loading.discard(name)

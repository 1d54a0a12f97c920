"""Admission (TPM/RPM), LoRA-aware candidate filtering, and routing policies."""
from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .autoscaler import MetricWindow, aggregate
from .kvcache import chain, match_prefix

POLICIES = ("random", "throughput", "least-request", "least-kv-cache", "least-latency",
            "prefix-cache-aware")

ADMITTED, REJECTED_TPM, REJECTED_RPM = "admitted", "rejected_tpm", "rejected_rpm"


@dataclass
class RoutingPolicy:
    kind: str = "random"
    prefix_threshold: float = 0.5
    fallback: str = "least-request"
    seed: int = 0
    overload_factor: float = 2.0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown routing policy {self.kind!r}")
        if self.fallback not in POLICIES or self.fallback == "prefix-cache-aware":
            raise ValueError(f"invalid fallback policy {self.fallback!r}")
        if not 0.0 <= self.prefix_threshold <= 1.0:
            raise ValueError("prefix_threshold must be in [0, 1]")
        self.rng = np.random.default_rng(self.seed)


# ---------------------------------------------------------------------------
# rate control
# ---------------------------------------------------------------------------

class TokenBucket:
    """Bucket of size ``limit`` refilled continuously at ``limit / 60`` per second."""

    def __init__(self, limit: float, now: float = 0.0):
        if limit <= 0:
            raise ValueError("bucket limit must be > 0")
        self.limit = float(limit)
        self.fill = float(limit)
        self.last = now

    def refill(self, now: float) -> None:
        if now > self.last:
            self.fill = min(self.limit, self.fill + (now - self.last) * self.limit / 60.0)
            self.last = now


class RateLimiter:
    """Per-tenant TPM/RPM buckets.  ``limits`` maps tenant to
    ``{"tpm": ..., "rpm": ...}``; the ``"*"`` entry applies to unlisted tenants."""

    def __init__(self, limits: Optional[dict] = None):
        self.limits = dict(limits or {})
        self.buckets: dict = {}

    def _buckets(self, tenant, now):
        if tenant not in self.buckets:
            lim = self.limits.get(tenant, self.limits.get("*"))
            if lim is None:
                self.buckets[tenant] = None
            else:
                tpm = TokenBucket(lim["tpm"], now) if lim.get("tpm") else None
                rpm = TokenBucket(lim["rpm"], now) if lim.get("rpm") else None
                self.buckets[tenant] = (tpm, rpm)
        return self.buckets[tenant]

    def admit(self, tenant, request, now: float) -> str:
        b = self._buckets(tenant, now)
        if b is None:
            return ADMITTED
        tpm, rpm = b
        cost = request.prompt_len + request.output_len
        if tpm is not None:
            tpm.refill(now)
            if tpm.fill < cost:
                return REJECTED_TPM
        if rpm is not None:
            rpm.refill(now)
            if rpm.fill < 1.0:
                return REJECTED_RPM
        if tpm is not None:
            tpm.fill -= cost
        if rpm is not None:
            rpm.fill -= 1.0
        return ADMITTED


def admit(limiter: RateLimiter, tenant, request, now: float) -> str:
    return limiter.admit(tenant, request, now)


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------

class InstanceSnapshot(NamedTuple):
    throughput: float      # tokens/s over the stats window
    inflight: int          # admitted, not yet finished
    kv_util: float         # windowed mean of kv_used / kv_capacity
    latency: float         # windowed mean of queue + serve latency
    queue_depth: int       # requests waiting for admission on the instance


class InstanceStats:
    def __init__(self, window: float = 30.0):
        self.window = window
        self.tokens = MetricWindow(window)
        self.latency = MetricWindow(window)
        self.kv = MetricWindow(window)

    def throughput(self, now: float) -> float:
        return self.tokens.sum(now) / self.window

    def avg_latency(self, now: float) -> float:
        return aggregate(self.latency, now)

    def avg_kv(self, now: float) -> float:
        return aggregate(self.kv, now)


class GatewayStats:
    def __init__(self, window: float = 30.0):
        self.window = window
        self.per_instance: dict = {}

    def get(self, iid) -> InstanceStats:
        st = self.per_instance.get(iid)
        if st is None:
            st = self.per_instance[iid] = InstanceStats(self.window)
        return st

    def sample_kv(self, iid, now: float, util: float) -> None:
        self.get(iid).kv.add(now, util)

    def snapshot(self, instances, now: float) -> dict:
        out = {}
        for inst in instances:
            st = self.get(inst.id)
            out[inst.id] = InstanceSnapshot(
                throughput=st.throughput(now),
                inflight=inst.inflight,
                kv_util=st.avg_kv(now),
                latency=st.avg_latency(now),
                queue_depth=len(inst.queue),
            )
        return out


def record_outcome(stats: GatewayStats, instance, request, queue_latency: float,
                   serve_latency: float, tokens: int, now: float) -> None:
    iid = getattr(instance, "id", instance)
    st = stats.get(iid)
    st.latency.add(now, queue_latency + serve_latency)
    st.tokens.add(now, tokens)
    st.latency.expire(now)
    st.tokens.expire(now)


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------

def candidates(fleet, request) -> list:
    """Ready, non-draining instances of the request's model holding its adapter."""
    out = []
    for inst in fleet.instances.values():
        if not inst.routable or inst.model != request.model:
            continue
        if request.adapter is not None and request.adapter not in inst.adapters:
            continue
        out.append(inst.id)
    return sorted(out)


_METRIC = {
    "throughput": lambda s: s.throughput,
    "least-request": lambda s: s.inflight,
    "least-kv-cache": lambda s: s.kv_util,
    "least-latency": lambda s: s.latency,
}


def _argmin(cands, stats, kind):
    key = _METRIC[kind]
    best, best_v = None, None
    for iid in cands:  # ascending ids, strict < keeps the lowest id on ties
        v = key(stats[iid])
        if best is None or v < best_v:
            best, best_v = iid, v
    return best


def _simple(policy, cands, stats, kind):
    if kind == "random":
        return cands[int(policy.rng.integers(len(cands)))]
    return _argmin(cands, stats, kind)


def decide(policy: RoutingPolicy, request, cands, stats: dict, caches: dict,
           now: float = 0.0, keys=None, block_size: int = 16):
    """Route one request; returns ``(instance_id, reason)``."""
    if not cands:
        raise ValueError("no routing candidates")
    cands = sorted(cands)
    if policy.kind != "prefix-cache-aware":
        return _simple(policy, cands, stats, policy.kind), policy.kind
    if keys is None:
        keys = chain(request.prompt, block_size)
    plen = request.prompt_len
    best, best_ratio = None, -1.0
    for iid in cands:
        cache = caches.get(iid)
        ratio = match_prefix(cache, keys) / plen if cache is not None else 0.0
        if ratio > best_ratio:
            best, best_ratio = iid, ratio
    if best_ratio >= policy.prefix_threshold and best_ratio > 0:
        median_q = statistics.median(stats[i].queue_depth for i in cands)
        if stats[best].queue_depth > policy.overload_factor * median_q:
            return _simple(policy, cands, stats, policy.fallback), "overloaded:" + policy.fallback
        return best, "prefix-hit"
    return _simple(policy, cands, stats, policy.fallback), "fallback:" + policy.fallback


def route(policy: RoutingPolicy, request, cands, stats: dict, caches: dict,
          now: float = 0.0, keys=None, block_size: int = 16) -> int:
    return decide(policy, request, cands, stats, caches, now, keys, block_size)[0]


class DecisionLog:
    def __init__(self):
        self.rows: list = []

    def add(self, t, request_id, instance, reason):
        self.rows.append({"t": t, "request": request_id, "instance": instance,
                          "reason": reason})

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows)

"""Sliding-window metrics and the HPA / KPA / APA scaling rules."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

ALGORITHMS = ("hpa", "kpa", "apa")
METRICS = ("concurrency", "kv_utilization", "tokens_per_sec")


class MetricWindow:
    """Time-ordered samples, keeping only those in ``[now - span, now]``."""

    def __init__(self, span: float):
        if span <= 0:
            raise ValueError("window span must be > 0")
        self.span = float(span)
        self.samples: deque = deque()

    def add(self, t: float, value: float) -> None:
        if self.samples and t < self.samples[-1][0]:
            raise ValueError("samples must be added in time order")
        self.samples.append((t, value))

    def expire(self, now: float) -> None:
        cutoff = now - self.span
        s = self.samples
        while s and s[0][0] < cutoff:
            s.popleft()

    def values(self, now: float) -> list:
        self.expire(now)
        return [v for t, v in self.samples if t <= now]

    def sum(self, now: float) -> float:
        return math.fsum(self.values(now))

    def __len__(self):
        return len(self.samples)


def aggregate(window: MetricWindow, now: float) -> float:
    """Mean of in-span samples (0 when empty).

    The sum is exact before the single division, so the result does not
    depend on insertion or expiry history.
    """
    vals = window.values(now)
    if not vals:
        return 0.0
    return math.fsum(vals) / len(vals)


@dataclass
class ScalerConfig:
    algorithm: str = "kpa"
    target: float = 4.0
    metric: Optional[str] = None
    hpa_tolerance: float = 0.1
    kpa_stable_span: float = 60.0
    kpa_panic_span: float = 6.0
    kpa_panic_threshold: float = 2.0
    apa_up_fluctuation: float = 0.1
    apa_down_fluctuation: float = 0.2
    min_replicas: int = 1
    max_replicas: int = 16
    sync_period: float = 15.0
    cold_start: float = 150.0
    sample_period: float = 1.0

    def __post_init__(self):
        if self.metric is None:
            self.metric = "kv_utilization" if self.algorithm == "apa" else "concurrency"
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown scaling algorithm {self.algorithm!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown scaling metric {self.metric!r}")
        if self.target <= 0:
            raise ValueError("scaler target must be > 0")
        if self.kpa_stable_span <= 0 or self.kpa_panic_span <= 0:
            raise ValueError("KPA spans must be > 0")
        if self.kpa_panic_span > self.kpa_stable_span:
            raise ValueError("KPA panic span must not exceed stable span")
        # the default band (up 0.1, down 0.2) is deliberately asymmetric
        if self.apa_up_fluctuation <= 0 or not 0 < self.apa_down_fluctuation < 1:
            raise ValueError("APA needs up_fluctuation > 0 and 0 < down_fluctuation < 1")
        if not 0 <= self.min_replicas <= self.max_replicas:
            raise ValueError("need 0 <= min_replicas <= max_replicas")
        if self.sync_period <= 0 or self.sample_period <= 0 or self.cold_start < 0:
            raise ValueError("periods must be > 0 and cold_start >= 0")


@dataclass
class ScalerState:
    current_replicas: int
    starting: list = field(default_factory=list)
    panic_mode: bool = False
    panic_max: int = 0
    panic_since: Optional[float] = None
    last_trigger: Optional[float] = None


def clamp(n: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, n))


def _ceil_ratio(current: int, metric_value: float, target: float) -> int:
    # exact rational ceil so e.g. 4 * (10/5) is 8, not 9
    return math.ceil(Fraction(current) * Fraction(metric_value) / Fraction(target))


def hpa_desired(current: int, metric_value: float, target: float, tolerance: float,
                min_replicas: int = 1, max_replicas: int = 1 << 30) -> int:
    if target <= 0:
        raise ValueError("target must be > 0")
    ratio = metric_value / target
    if abs(ratio - 1.0) <= tolerance:
        return clamp(current, min_replicas, max_replicas)
    return clamp(_ceil_ratio(current, metric_value, target), min_replicas, max_replicas)


def apa_desired(current: int, metric_value: float, target: float, up_fluct: float,
                down_fluct: float, min_replicas: int = 1, max_replicas: int = 1 << 30) -> int:
    if target <= 0:
        raise ValueError("target must be > 0")
    ratio = metric_value / target
    if ratio >= 1 + up_fluct or ratio <= 1 - down_fluct:
        return clamp(_ceil_ratio(current, metric_value, target), min_replicas, max_replicas)
    return clamp(current, min_replicas, max_replicas)


def kpa_desired(stable_value: float, panic_value: float, state: ScalerState, target: float,
                panic_threshold: float, ready: int, now: float, stable_span: float,
                min_replicas: int = 1, max_replicas: int = 1 << 30):
    """Knative-style decision; mutates the panic fields of ``state``.

    Returns ``(replicas, panic_mode)``.  Panic starts when the short-window
    demand reaches ``panic_threshold`` times the ready replicas and ends
    only after a full stable span without that trigger.  While panicking the
    replica count never goes down.
    """
    if target <= 0:
        raise ValueError("target must be > 0")
    stable_desired = math.ceil(Fraction(stable_value) / Fraction(target))
    panic_desired = math.ceil(Fraction(panic_value) / Fraction(target))
    triggered = panic_desired >= panic_threshold * max(ready, 1)
    if triggered:
        if not state.panic_mode:
            state.panic_mode = True
            state.panic_since = now
            state.panic_max = state.current_replicas
        state.last_trigger = now
    elif state.panic_mode and now - state.last_trigger >= stable_span:
        state.panic_mode = False
        state.panic_max = 0
        state.panic_since = None
    if state.panic_mode:
        want = max(state.panic_max, panic_desired, state.current_replicas)
        want = clamp(want, min_replicas, max_replicas)
        state.panic_max = max(state.panic_max, want)
        return want, True
    return clamp(stable_desired, min_replicas, max_replicas), False


@dataclass(frozen=True)
class ScaleAction:
    kind: str          # "add" | "remove" | "drain"
    instance: Optional[int] = None
    ready_at: Optional[float] = None


def reconcile(state: ScalerState, desired: int, now: float, cold_start: float,
              instances) -> list:
    """Turn a desired count into actions.

    ``instances`` is a sequence of ``(id, health, inflight)`` for the live,
    non-draining members of the group.  Scale-down removes the least busy
    first (newest on ties); busy ones are drained instead of killed.
    """
    current = len(instances)
    actions = []
    if desired > current:
        ready_at = now + cold_start
        for _ in range(desired - current):
            actions.append(ScaleAction("add", ready_at=ready_at))
            state.starting.append((None, ready_at))
    elif desired < current:
        # starting instances first, then fewest in-flight requests
        order = sorted(instances, key=lambda x: (x[1] != "starting", x[2], -x[0]))
        for iid, health, inflight in order[: current - desired]:
            actions.append(ScaleAction("remove" if inflight == 0 else "drain", instance=iid))
    state.current_replicas = desired
    state.starting = [(i, t) for i, t in state.starting if t > now]
    return actions


def external_plan_desired(plan, types, min_replicas: int = 0, max_replicas=None):
    """Per-type desired replicas from an optimizer plan.

    Returns ``(desired, clamped)`` where ``clamped`` lists the types whose
    plan count was cut to the bounds.
    """
    counts = getattr(plan, "counts", plan)
    for g in counts:
        if g not in types:
            raise KeyError(f"unknown GPU type {g!r} in plan")
    desired, clamped = {}, []
    for g in types:
        hi = max_replicas[g] if isinstance(max_replicas, dict) else max_replicas
        lo = min_replicas[g] if isinstance(min_replicas, dict) else min_replicas
        want = counts.get(g, 0)
        got = max(lo, want if hi is None else min(hi, want))
        if got != want:
            clamped.append(g)
        desired[g] = got
    return desired, clamped


def sign_changes(series) -> int:
    """Direction reversals in a replica-count series (zero deltas ignored)."""
    deltas = [b - a for a, b in zip(series, series[1:]) if b != a]
    return sum(1 for x, y in zip(deltas, deltas[1:]) if (x > 0) != (y > 0))

"""Discrete-event simulation of a serving fleet.

Each instance runs back-to-back iterations.  Without chunked prefill an
iteration either prefills every newly admitted request (stalling decode,
as vLLM's default scheduler does) or advances all running requests by one
token.  With chunked prefill, an iteration decodes one token for every
running request while also prefilling up to ``chunk_size`` prompt tokens.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .autoscaler import (MetricWindow, ScalerConfig, ScalerState, aggregate, apa_desired,
                         external_plan_desired, hpa_desired, kpa_desired, reconcile)
from .cluster import (FAILED, READY, REMOVED, STARTING, AdapterSpec, Fleet, PlacementError,
                      decode_step_time, prefill_time)
from .config import ScenarioConfig
from .gateway import (ADMITTED, DecisionLog, GatewayStats, RateLimiter, RoutingPolicy,
                      candidates, decide, record_outcome)
from .kvcache import PrefixCache, apply_prefill, chain, make_pool
from .workload import RequestTrace, bucket_index, bucketize, load_trace, synth_trace

logger = logging.getLogger(__name__)

_DEFAULT_SCALER = ScalerConfig()

EVENT_KINDS = ("arrival", "prefill_done", "decode_step", "completion", "metric_sample",
               "scaler_tick", "optimizer_tick", "adapter_loaded", "instance_ready",
               "instance_fail")


class InvariantError(RuntimeError):
    """The simulation reached an impossible state."""


def percentile(samples, p: float) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * n)``-th smallest sample."""
    if not 0 <= p <= 100:
        raise ValueError("p must be in [0, 100]")
    if len(samples) == 0:
        raise ValueError("percentile of an empty sample")
    return _kernels.nearest_rank(samples, p)


@dataclass
class RequestRecord:
    id: int
    arrival: float
    prompt_len: int
    output_len: int
    status: str = "pending"
    instance: Optional[int] = None
    admitted_at: Optional[float] = None
    first_token: Optional[float] = None
    done: Optional[float] = None
    local_hit: int = 0
    remote_hit: int = 0
    reason: str = ""

    @property
    def ttft(self):
        return None if self.first_token is None else self.first_token - self.arrival

    @property
    def e2e(self):
        return None if self.done is None else self.done - self.arrival


class _Job:
    __slots__ = ("req", "rec", "keys", "need_kv", "prefill_left", "transfer", "generated",
                 "last_token", "admitted_at", "inst")

    def __init__(self, req, rec, keys):
        self.req = req
        self.rec = rec
        self.keys = keys
        self.need_kv = req.prompt_len + req.output_len
        self.prefill_left = 0
        self.transfer = 0.0
        self.generated = 0
        self.last_token = 0.0
        self.admitted_at = 0.0
        self.inst = None


class _Group:
    """Runtime state of one deployment."""

    def __init__(self, dep, profile, scaler, now=0.0):
        self.dep = dep
        self.profile = profile
        self.desired = dep.replicas
        self.state = ScalerState(current_replicas=dep.replicas)
        self.windows = {}
        if scaler is not None:
            self.windows = {
                "stable_total": MetricWindow(scaler.kpa_stable_span),
                "panic_total": MetricWindow(scaler.kpa_panic_span),
                "hpa_inst": MetricWindow(scaler.sync_period),
                "apa_inst": MetricWindow(scaler.kpa_stable_span),
            }

    def bounds(self, scaler):
        lo = self.dep.min_replicas
        hi = self.dep.max_replicas
        if scaler is not None:
            lo = scaler.min_replicas if lo is None else lo
            hi = scaler.max_replicas if hi is None else hi
        return (0 if lo is None else lo), (1 << 30 if hi is None else hi)


@dataclass
class MetricsReport:
    summary: dict
    records: list = field(default_factory=list)
    replicas: list = field(default_factory=list)
    decisions: Optional[DecisionLog] = None

    def __getitem__(self, key):
        return self.summary[key]

    def to_dict(self) -> dict:
        d = dict(self.summary)
        d["replicas"] = [list(r) for r in self.replicas]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "arrival", "status", "instance", "prompt_len", "output_len",
                    "ttft", "e2e", "local_hit", "remote_hit", "reason"])
        for r in self.records:
            w.writerow([r.id, repr(r.arrival), r.status, "" if r.instance is None else r.instance,
                        r.prompt_len, r.output_len,
                        "" if r.ttft is None else repr(r.ttft),
                        "" if r.e2e is None else repr(r.e2e), r.local_hit, r.remote_hit,
                        r.reason])
        return buf.getvalue()

    def replicas_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "deployment", "ready", "starting", "desired", "mode"])
        for row in self.replicas:
            w.writerow([repr(row[0])] + list(row[1:]))
        return buf.getvalue()

    def to_text(self, label: Optional[str] = None) -> str:
        return format_table([(label or self.summary.get("scenario", "run"), self.summary)])


TABLE_COLUMNS = [
    ("Prompt", lambda s: f"{s['tokens']['prompt']:d}"),
    ("Decoding", lambda s: f"{s['tokens']['decoding']:d}"),
    ("Thr.Total", lambda s: f"{s['throughput']['total']:,.2f}"),
    ("Thr.Decode", lambda s: f"{s['throughput']['decoding']:,.2f}"),
    ("TTFT.Avg", lambda s: f"{s['ttft_ms']['avg']:,.2f}"),
    ("TTFT.P99", lambda s: f"{s['ttft_ms']['p99']:,.2f}"),
    ("ITL.Avg", lambda s: f"{s['itl_ms']['avg']:,.2f}"),
    ("ITL.P99", lambda s: f"{s['itl_ms']['p99']:,.2f}"),
    ("Completion(s)", lambda s: f"{s['completion_time_s']:,.2f}"),
]


def format_table(rows) -> str:
    """Aligned text table, one row per ``(label, summary)``."""
    header = ["Method"] + [c[0] for c in TABLE_COLUMNS]
    body = [[label] + [fmt(s) for _, fmt in TABLE_COLUMNS] for label, s in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for r in [header] + body:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


class Simulation:
    def __init__(self, cfg: ScenarioConfig, trace: Optional[RequestTrace] = None,
                 capacity_table=None, on_event=None):
        self.cfg = cfg
        self.on_event = on_event   # called as on_event(sim, kind) after each event
        self.trace = trace if trace is not None else self._load_trace()
        self.block_size = cfg.block_size
        self.local_enabled = cfg.engine.prefix_caching
        self.chunked = cfg.engine.chunked_prefill
        self.pool = None
        if cfg.pool.enabled:
            self.pool = make_pool(cfg.pool.policy, capacity_tokens=cfg.pool.capacity_tokens,
                                  probation_tokens=cfg.pool.probation_tokens,
                                  bandwidth=cfg.pool.bandwidth, rtt=cfg.pool.rtt,
                                  block_size=cfg.block_size)
        self.need_keys = self.local_enabled or self.pool is not None \
            or cfg.gateway.policy == "prefix-cache-aware"
        g = cfg.gateway
        self.policy = RoutingPolicy(g.policy, g.prefix_threshold, g.fallback, seed=cfg.seed,
                                    overload_factor=g.overload_factor)
        self.stats = GatewayStats(g.stats_window)
        self.limiter = RateLimiter(g.rate_limits) if g.rate_limits else None
        self.decisions = DecisionLog() if cfg.output.decisions or g.decision_log else None
        self.scaler = cfg.scaler
        self.sync_period = cfg.scaler.sync_period if cfg.scaler else 15.0
        self.fleet = Fleet()
        self.groups = {}
        self.capacity_table = capacity_table
        self.plan = None
        self.plans = []
        self._plan_rng = np.random.default_rng(cfg.seed + 1)

        self.now = 0.0
        self._events = []
        self._seq = 0
        self._next_arrival = 0
        self.records = []
        self.itl = []
        self.admission_log = []
        self.replicas = []
        self.counts = {"arrived": 0, "admitted": 0, "rejected_tpm": 0, "rejected_rpm": 0,
                       "completed": 0, "failed": 0}
        self.fail_reasons = {}
        self.computed_tokens = 0
        self.last_done = None

    # -- setup ----------------------------------------------------------------

    def _load_trace(self) -> RequestTrace:
        w = self.cfg.workload
        if w.trace is not None:
            return load_trace(self.cfg.resolve(w.trace), w.format, vocab=w.vocab,
                              seed=self.cfg.seed)
        return synth_trace(self.cfg.synth_spec())

    def _new_cache(self, profile):
        if not self.local_enabled:
            return None
        cap = self.cfg.engine.prefix_cache_tokens
        return PrefixCache(profile.kv_capacity if cap is None else cap, self.block_size)

    def _add_instance(self, group, now, ready_at=None):
        return self.fleet.add_instance(group.profile, group.dep.model, group.dep.name, now=now,
                                       ready_at=ready_at, local_cache=self._new_cache(group.profile))

    def _setup(self):
        cfg = self.cfg
        if cfg.optimizer.enabled:
            self._setup_optimizer()
        for dep in cfg.deployments:
            group = _Group(dep, cfg.profiles[dep.gpu], self.scaler)
            self.groups[dep.name] = group
            for _ in range(group.desired):
                self._add_instance(group, 0.0)
        for a in cfg.adapters:
            for _ in range(a.copies):
                iid, _ = self.fleet.register_adapter(a.spec(), a.strategy, 0.0)
                self.fleet.finish_adapter_load(a.name, iid)
        for ev in cfg.adapter_events:
            self._push(ev.time, "adapter_event", ev)
        for f in cfg.faults:
            self._push(f.time, "instance_fail", f)
        self._record_replicas(0.0)

    def _setup_optimizer(self):
        from .optimizer import CapacityTable, solve
        cfg = self.cfg
        if self.capacity_table is None:
            if cfg.optimizer.capacity_table is None:
                raise InvariantError("optimizer enabled without a capacity table")
            self.capacity_table = CapacityTable.load(cfg.resolve(cfg.optimizer.capacity_table))
        if cfg.optimizer.mode == "static":
            hist = bucketize(self.trace, cfg.optimizer.edges_in, cfg.optimizer.edges_out,
                             duration=self.trace.duration)
            plan = solve(hist, self.capacity_table.scaled(cfg.optimizer.headroom),
                         self._costs(), self._type_bounds())
            self._apply_plan(plan, 0.0, initial=True)

    def _costs(self):
        return {d.gpu: self.cfg.profiles[d.gpu].hourly_cost for d in self.cfg.deployments}

    def _type_bounds(self):
        out = {}
        for d in self.cfg.deployments:
            hi = d.max_replicas
            if hi is None and self.cfg.optimizer.max_per_type is not None:
                hi = self.cfg.optimizer.max_per_type
            out[d.gpu] = (d.min_replicas or 0, hi)
        return out

    def _apply_plan(self, plan, now, initial=False):
        self.plan = plan
        self.plans.append({"t": now, "counts": dict(sorted(plan.counts.items())),
                           "cost_per_hour": plan.cost})
        types = [d.gpu for d in self.cfg.deployments]
        desired, clamped = external_plan_desired(plan, types)
        for dep in self.cfg.deployments:
            if initial:
                dep.replicas = desired[dep.gpu]
            else:
                group = self.groups[dep.name]
                group.desired = desired[dep.gpu]
                self._reconcile(group, group.desired, now)

    # -- event plumbing ------------------------------------------------------

    def _push(self, t, kind, payload=None):
        if t < self.now:
            raise InvariantError(f"event {kind} scheduled in the past ({t} < {self.now})")
        heapq.heappush(self._events, (t, self._seq, kind, payload))
        self._seq += 1

    def _active(self):
        if self._next_arrival < len(self.trace.requests):
            return True
        return any(i.inflight for i in self.fleet.instances.values())

    def run(self) -> MetricsReport:
        self._setup()
        reqs = self.trace.requests
        if reqs:
            self._push(reqs[0].arrival, "arrival")
            first = reqs[0].arrival
            if self.scaler is not None:
                self._push(first, "metric_sample")
            self._push(first + self.sync_period, "scaler_tick")
            if self.cfg.optimizer.enabled and self.cfg.optimizer.mode == "online":
                self._push(first + self.cfg.optimizer.interval, "optimizer_tick")
        handlers = {
            "arrival": self._on_arrival,
            "prefill_done": self._on_iteration,
            "decode_step": self._on_iteration,
            "metric_sample": self._on_sample,
            "scaler_tick": self._on_scaler_tick,
            "optimizer_tick": self._on_optimizer_tick,
            "adapter_loaded": self._on_adapter_loaded,
            "adapter_event": self._on_adapter_event,
            "instance_ready": self._on_instance_ready,
            "instance_fail": self._on_fail,
        }
        while self._events:
            t, _, kind, payload = heapq.heappop(self._events)
            if t < self.now:
                raise InvariantError("clock moved backwards")
            self.now = t
            handlers[kind](payload)
            if self.on_event is not None:
                self.on_event(self, kind)
        return self._report()

    # -- arrivals and routing -----------------------------------------------

    def _fail(self, rec, reason):
        rec.status = "failed"
        rec.reason = reason
        self.counts["failed"] += 1
        self.fail_reasons[reason] = self.fail_reasons.get(reason, 0) + 1

    def _on_arrival(self, _):
        now = self.now
        reqs = self.trace.requests
        req = reqs[self._next_arrival]
        self._next_arrival += 1
        if self._next_arrival < len(reqs):
            self._push(reqs[self._next_arrival].arrival, "arrival")
        rec = RequestRecord(req.id, req.arrival, req.prompt_len, req.output_len)
        self.records.append(rec)
        self.counts["arrived"] += 1
        if self.limiter is not None:
            verdict = self.limiter.admit(req.tenant, req, now)
            if verdict != ADMITTED:
                rec.status = verdict
                self.counts[verdict] += 1
                return
        self.counts["admitted"] += 1
        self.admission_log.append((now, req.prompt_len, req.output_len))
        cands = candidates(self.fleet, req)
        if cands and self.plan is not None:
            cands = self._plan_filter(req, cands)
        if not cands:
            self._fail(rec, "no_candidates")
            if self.decisions is not None:
                self.decisions.add(now, req.id, None, "no_candidates")
            return
        keys = chain(req.prompt, self.block_size) if self.need_keys else None
        insts = self.fleet.instances
        if self.policy.kind in ("least-kv-cache",) or self.policy.fallback == "least-kv-cache":
            for iid in cands:
                inst = insts[iid]
                self.stats.sample_kv(iid, now, inst.kv_used / inst.gpu.kv_capacity)
        snap = self.stats.snapshot([insts[i] for i in cands], now)
        caches = {i: insts[i].local_cache for i in cands}
        iid, reason = decide(self.policy, req, cands, snap, caches, now, keys, self.block_size)
        if self.decisions is not None:
            self.decisions.add(now, req.id, iid, reason)
        inst = insts[iid]
        if not inst.routable:
            raise InvariantError(f"routed request {req.id} to unroutable instance {iid}")
        job = _Job(req, rec, keys)
        job.inst = inst
        rec.instance = iid
        inst.queue.append(job)
        self._kick(inst)

    def _plan_filter(self, req, cands):
        opt = self.cfg.optimizer
        try:
            b = (bucket_index(req.prompt_len, opt.edges_in), bucket_index(req.output_len, opt.edges_out))
        except ValueError:
            return cands
        types = sorted(self.plan.counts)
        w = np.array([self.plan.assignment.get((g, b), 0.0) for g in types])
        if w.sum() <= 0:
            return cands
        g = types[int(self._plan_rng.choice(len(types), p=w / w.sum()))]
        picked = [i for i in cands if self.fleet.instances[i].gpu.name == g]
        return picked or cands

    # -- instance iterations -------------------------------------------------

    def _admit(self, inst):
        now = self.now
        cap = inst.gpu.batch_capacity
        while inst.queue and len(inst.prefilling) + len(inst.running) < cap:
            job = inst.queue[0]
            if job.need_kv > inst.gpu.kv_capacity:
                inst.queue.popleft()
                self._fail(job.rec, "exceeds_kv_capacity")
                continue
            if job.need_kv > inst.kv_free:
                break
            inst.queue.popleft()
            inst.kv_used += job.need_kv
            job.admitted_at = now
            job.rec.admitted_at = now
            if job.keys is not None:
                out = apply_prefill(inst, self.pool, job.keys, job.req.prompt_len,
                                    self.local_enabled)
                job.rec.local_hit = out.local_hit
                job.rec.remote_hit = out.remote_hit
                job.prefill_left = job.req.prompt_len - out.local_hit - out.remote_hit
                job.transfer = out.transfer_time
            else:
                job.prefill_left = job.req.prompt_len
            self.computed_tokens += job.prefill_left
            inst.prefilling.append(job)

    def _kick(self, inst):
        if inst.busy or inst.health != READY:
            return
        self._admit(inst)
        gpu = inst.effective_gpu
        if not self.chunked:
            if inst.prefilling:
                jobs = list(inst.prefilling)
                dur = 0.0
                for j in jobs:
                    dur += j.transfer + prefill_time(gpu, j.prefill_left)
                    j.transfer, j.prefill_left = 0.0, 0
                self._start(inst, dur, "prefill_done", jobs, [])
            elif inst.running:
                self._start(inst, decode_step_time(gpu, len(inst.running)), "decode_step",
                            [], list(inst.running))
            return
        decoding = list(inst.running)
        budget = self.cfg.engine.chunk_size - len(decoding)
        if not decoding:
            budget = self.cfg.engine.chunk_size
        budget = max(budget, 1)
        tokens, transfer, finishing = 0, 0.0, []
        for j in inst.prefilling:
            if tokens >= budget and j.prefill_left > 0:
                break
            transfer += j.transfer
            j.transfer = 0.0
            take = min(j.prefill_left, budget - tokens)
            j.prefill_left -= take
            tokens += take
            if j.prefill_left == 0:
                finishing.append(j)
        if not decoding and not finishing and tokens == 0:
            return
        dur = prefill_time(gpu, tokens) + transfer
        if decoding:
            dur = max(dur, decode_step_time(gpu, len(decoding)))
        self._start(inst, dur, "decode_step" if decoding else "prefill_done", finishing, decoding)

    def _start(self, inst, dur, kind, finishing, decoding):
        inst.busy = True
        inst.check()
        self._push(self.now + dur, kind, (inst.id, inst.epoch, finishing, decoding))

    def _on_iteration(self, payload):
        iid, epoch, finishing, decoding = payload
        inst = self.fleet.instances[iid]
        if epoch != inst.epoch:
            return
        now = self.now
        inst.busy = False
        for j in decoding:
            j.generated += 1
            self.itl.append(now - j.last_token)
            j.last_token = now
            if j.generated >= j.req.output_len:
                self._complete(inst, j)
        for j in finishing:
            if self.chunked:
                inst.prefilling.remove(j)
            j.rec.first_token = now
            j.last_token = now
            if j.keys is not None:
                if self.local_enabled and inst.local_cache is not None:
                    inst.local_cache.insert(j.keys)
                if self.pool is not None:
                    self.pool.insert(j.keys)
            inst.running.append(j)
        if not self.chunked:
            inst.prefilling.clear()
        if inst.draining and inst.inflight == 0:
            self._remove(inst)
            return
        inst.check()
        self._kick(inst)

    def _complete(self, inst, j):
        now = self.now
        inst.running.remove(j)
        inst.kv_used -= j.need_kv
        rec = j.rec
        rec.done = now
        rec.status = "completed"
        self.counts["completed"] += 1
        self.last_done = now
        record_outcome(self.stats, inst, j.req, j.admitted_at - j.req.arrival,
                       now - j.admitted_at, j.req.prompt_len + j.req.output_len, now)
        if j.keys is not None and j.req.output is not None:
            full = chain(j.req.prompt + j.req.output, self.block_size)
            if len(full) > len(j.keys):
                if self.local_enabled and inst.local_cache is not None:
                    inst.local_cache.insert(full)
                if self.pool is not None:
                    self.pool.insert(full, start=len(j.keys))

    # -- fleet lifecycle ----------------------------------------------------

    def _remove(self, inst):
        inst.health = REMOVED
        inst.removed_at = self.now
        inst.epoch += 1
        inst.busy = False

    def _on_instance_ready(self, iid):
        inst = self.fleet.instances[iid]
        if inst.health == STARTING:
            inst.health = READY

    def _on_fail(self, fault):
        targets = []
        insts = self.fleet.instances
        if fault.instance is not None:
            if fault.instance not in insts:
                raise InvariantError(f"fault names unknown instance {fault.instance}")
            targets = [insts[fault.instance]]
        else:
            targets = [i for i in insts.values() if i.gpu.name == fault.gpu_type]
        for inst in targets:
            if inst.health not in (READY, STARTING):
                continue
            if fault.mode == "degrade":
                inst.set_degrade(fault.factor)
                continue
            lost = list(inst.queue) + list(inst.prefilling) + list(inst.running)
            for j in lost:
                self._fail(j.rec, "instance_failed")
            inst.queue.clear()
            inst.prefilling.clear()
            inst.running.clear()
            inst.kv_used = 0
            inst.health = FAILED
            inst.removed_at = self.now
            inst.epoch += 1
            inst.busy = False
            held = sorted(inst.adapters | inst.loading)
            inst.adapters.clear()
            inst.loading.clear()
            for name in held:
                spec = self.fleet.adapters.get(name)
                if spec is None:
                    continue
                try:
                    target, ready_at = self.fleet.register_adapter(spec, "least-adapters", self.now)
                except PlacementError:
                    logger.warning("adapter %s lost with instance %d", name, inst.id)
                    continue
                self._push(ready_at, "adapter_loaded", (name, target))

    def _on_adapter_loaded(self, payload):
        name, iid = payload
        self.fleet.finish_adapter_load(name, iid)

    def _on_adapter_event(self, ev):
        if ev.action == "unregister":
            self.fleet.unregister_adapter(ev.name)
            return
        spec = AdapterSpec(ev.name, ev.base_model, ev.load_time)
        try:
            iid, ready_at = self.fleet.register_adapter(spec, ev.strategy, self.now)
        except PlacementError:
            logger.warning("no room to place adapter %s at t=%.1f", ev.name, self.now)
            return
        self._push(ready_at, "adapter_loaded", (ev.name, iid))

    # -- autoscaling -----------------------------------------------------------

    def _group_instances(self, group):
        return [i for i in self.fleet.instances.values() if i.deployment == group.dep.name]

    def _on_sample(self, _):
        now = self.now
        metric = self.scaler.metric
        for group in self.groups.values():
            ready = [i for i in self._group_instances(group) if i.health == READY]
            serving = max(1, sum(1 for i in ready if not i.draining))
            if metric == "concurrency":
                total = float(sum(i.inflight for i in ready))
            elif metric == "kv_utilization":
                total = float(sum(i.kv_used / i.gpu.kv_capacity for i in ready))
            else:
                total = math.fsum(self.stats.get(i.id).throughput(now) for i in ready)
            w = group.windows
            w["stable_total"].add(now, total)
            w["panic_total"].add(now, total)
            w["hpa_inst"].add(now, total / serving)
            w["apa_inst"].add(now, total / serving)
        if self._active():
            self._push(now + self.scaler.sample_period, "metric_sample")

    def _live(self, group):
        return [i for i in self._group_instances(group)
                if i.health in (READY, STARTING) and not i.draining]

    def _decide(self, group):
        sc = self.scaler
        lo, hi = group.bounds(sc)
        if sc is None or (self.cfg.optimizer.enabled and self.plan is not None):
            return group.desired, "static" if sc is None else "plan"
        now = self.now
        w = group.windows
        current = max(1, group.state.current_replicas)
        if sc.algorithm == "hpa":
            return hpa_desired(current, aggregate(w["hpa_inst"], now), sc.target,
                               sc.hpa_tolerance, lo, hi), "hpa"
        if sc.algorithm == "apa":
            return apa_desired(current, aggregate(w["apa_inst"], now), sc.target,
                               sc.apa_up_fluctuation, sc.apa_down_fluctuation, lo, hi), "apa"
        ready = sum(1 for i in self._live(group) if i.health == READY)
        want, panic = kpa_desired(aggregate(w["stable_total"], now),
                                  aggregate(w["panic_total"], now), group.state, sc.target,
                                  sc.kpa_panic_threshold, ready, now, sc.kpa_stable_span, lo, hi)
        return want, "panic" if panic else "stable"

    def _reconcile(self, group, desired, now):
        live = self._live(group)
        cold = (self.scaler or _DEFAULT_SCALER).cold_start
        actions = reconcile(group.state, desired, now, cold,
                            [(i.id, i.health, i.inflight) for i in live])
        for a in actions:
            if a.kind == "add":
                inst = self._add_instance(group, now, a.ready_at)
                if inst.health == STARTING:
                    self._push(a.ready_at, "instance_ready", inst.id)
            elif a.kind == "remove":
                self._remove(self.fleet.instances[a.instance])
            else:
                inst = self.fleet.instances[a.instance]
                inst.draining = True
                if inst.inflight == 0:
                    self._remove(inst)

    def _on_scaler_tick(self, _):
        now = self.now
        for group in self.groups.values():
            desired, mode = self._decide(group)
            group.desired = desired
            self._reconcile(group, desired, now)
            self._record_replicas(now, group, mode)
        if self._active():
            self._push(now + self.sync_period, "scaler_tick")

    def _record_replicas(self, now, group=None, mode="init"):
        groups = [group] if group is not None else list(self.groups.values())
        for g in groups:
            live = self._live(g)
            ready = sum(1 for i in live if i.health == READY)
            self.replicas.append((now, g.dep.name, ready, len(live) - ready, g.desired, mode))

    def _on_optimizer_tick(self, _):
        from .optimizer import InfeasibleError, monitor, solve
        now = self.now
        opt = self.cfg.optimizer
        hist = monitor(self.admission_log, opt.edges_in, opt.edges_out, opt.interval, now)
        if hist.total_rate > 0:
            try:
                plan = solve(hist, self.capacity_table.scaled(opt.headroom), self._costs(),
                             self._type_bounds())
            except InfeasibleError as exc:
                logger.warning("optimizer: %s; keeping previous plan", exc)
            else:
                self._apply_plan(plan, now)
        if self._active():
            self._push(now + opt.interval, "optimizer_tick")

    # -- reporting ---------------------------------------------------------

    def _report(self) -> MetricsReport:
        done = [r for r in self.records if r.status == "completed"]
        c = self.counts
        if c["admitted"] != c["completed"] + c["failed"]:
            raise InvariantError(f"conservation violated: {c}")
        for r in done:
            if r.done < r.arrival:
                raise InvariantError(f"request {r.id} completed before arriving")
        prompt = sum(r.prompt_len for r in done)
        decoded = sum(r.output_len for r in done)
        if self.records and self.last_done is not None:
            completion = self.last_done - self.records[0].arrival
        else:
            completion = 0.0

        def stat(xs, scale):
            if len(xs) == 0:
                return {"avg": 0.0, "p99": 0.0}
            return {"avg": math.fsum(xs) / len(xs) * scale, "p99": percentile(xs, 99) * scale}

        ttft = [r.ttft for r in done]
        e2e = [r.e2e for r in done]
        end = self.now
        cost = 0.0
        per_instance = {}
        for inst in self.fleet.instances.values():
            stop = inst.removed_at if inst.removed_at is not None else end
            cost += max(0.0, stop - inst.created_at) / 3600.0 * inst.gpu.hourly_cost
            if inst.local_cache is not None:
                per_instance[str(inst.id)] = inst.local_cache.stats()
        slo = self.cfg.slo
        lat = ttft if slo.metric == "ttft" else e2e
        within = sum(1 for x in lat if x <= slo.value)
        summary = {
            "scenario": self.cfg.name,
            "seed": self.cfg.seed,
            "requests": dict(c),
            "failures": dict(sorted(self.fail_reasons.items())),
            "tokens": {"prompt": prompt, "decoding": decoded},
            "throughput": {
                "total": (prompt + decoded) / completion if completion > 0 else 0.0,
                "decoding": decoded / completion if completion > 0 else 0.0,
            },
            "ttft_ms": stat(ttft, 1000.0),
            "itl_ms": stat(self.itl, 1000.0),
            "e2e_s": stat(e2e, 1.0),
            "completion_time_s": completion,
            "cache": {
                "local_hit_tokens": sum(r.local_hit for r in done),
                "remote_hit_tokens": sum(r.remote_hit for r in done),
                "computed_prefill_tokens": self.computed_tokens,
                "per_instance": per_instance,
                "pool": self.pool.stats() if self.pool is not None else None,
            },
            "cost": cost,
            "slo": {"metric": slo.metric, "target": slo.value if math.isfinite(slo.value) else None,
                    "attainment": within / len(lat) if lat else 1.0},
            "plans": self.plans,
        }
        return MetricsReport(summary, self.records, self.replicas, self.decisions)


def run(cfg: ScenarioConfig, trace: Optional[RequestTrace] = None,
        capacity_table=None) -> MetricsReport:
    return Simulation(cfg, trace, capacity_table).run()


def inject_failure(cfg: ScenarioConfig, time: float, target, mode: str = "crash",
                   factor: float = 0.5) -> None:
    """Add a fault to ``cfg``; ``target`` is an instance id (int) or a GPU type name."""
    from .config import ConfigError, FaultSpec
    try:
        if isinstance(target, int):
            spec = FaultSpec(time=time, mode=mode, instance=target, factor=factor)
        else:
            spec = FaultSpec(time=time, mode=mode, gpu_type=str(target), factor=factor)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.faults.append(spec)
    cfg.validate()

"""Workload-aware GPU mix selection.

``solve`` picks integer GPU counts per type minimising hourly cost such
that bucketed demand can be split fractionally across the chosen GPUs.
Counts are enumerated best-first in exact (rational) cost order, so the
first feasible vector is optimal.  Feasibility of one count vector is a
small LP, solved by a dense two-phase simplex with Bland's rule; the
second phase only shapes the witness assignment.
"""
from __future__ import annotations

import csv
import heapq
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from types import SimpleNamespace
from typing import Optional

import numpy as np

from .cluster import GpuProfile, decode_step_time, prefill_time
from .workload import (Request, RequestTrace, WorkloadHistogram, bucket_representative,
                       bucketize, synth_tokens)

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9
CAPACITY_FIELDS = ["gpu", "in_bucket", "out_bucket", "in_len", "out_len", "rps", "status"]


class InfeasibleError(ValueError):
    """Demand cannot be served by any allowed GPU mix."""


# ---------------------------------------------------------------------------
# capacity table
# ---------------------------------------------------------------------------

@dataclass
class CapacityTable:
    cap: dict = field(default_factory=dict)      # (gpu, in_bucket, out_bucket) -> req/s
    status: dict = field(default_factory=dict)
    lengths: dict = field(default_factory=dict)  # (in_bucket, out_bucket) -> (in_len, out_len)

    def get(self, gpu, bucket) -> float:
        return self.cap.get((gpu, bucket[0], bucket[1]), 0.0)

    def set(self, gpu, bucket, rps, status="ok", lengths=None):
        if rps < 0:
            raise ValueError("capacity must be >= 0")
        self.cap[(gpu, bucket[0], bucket[1])] = float(rps)
        self.status[(gpu, bucket[0], bucket[1])] = status
        if lengths is not None:
            self.lengths[tuple(bucket)] = tuple(lengths)

    @property
    def gpus(self) -> list:
        return sorted({k[0] for k in self.cap})

    def scaled(self, factor: float) -> "CapacityTable":
        if factor == 1.0:
            return self
        return CapacityTable({k: v * factor for k, v in self.cap.items()}, dict(self.status),
                             dict(self.lengths))

    def dumps(self) -> str:
        lines = [",".join(CAPACITY_FIELDS)]
        for (g, i, j) in sorted(self.cap):
            in_len, out_len = self.lengths.get((i, j), ("", ""))
            lines.append(f"{g},{i},{j},{in_len},{out_len},{self.cap[(g, i, j)]!r},"
                         f"{self.status.get((g, i, j), 'ok')}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "CapacityTable":
        table = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"gpu", "in_bucket", "out_bucket", "rps"} - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"{path}: capacity table lacks columns {sorted(missing)}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    b = (int(row["in_bucket"]), int(row["out_bucket"]))
                    lengths = None
                    if row.get("in_len") and row.get("out_len"):
                        lengths = (int(row["in_len"]), int(row["out_len"]))
                    table.set(row["gpu"], b, float(row["rps"]), row.get("status") or "ok",
                              lengths)
                except (TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
        return table


@dataclass
class AllocationPlan:
    counts: dict = field(default_factory=dict)        # gpu -> int
    assignment: dict = field(default_factory=dict)    # (gpu, bucket) -> req/s
    cost: float = 0.0
    cost_exact: Fraction = Fraction(0)
    explored: int = 0

    def to_dict(self) -> dict:
        return {
            "counts": dict(sorted(self.counts.items())),
            "cost": self.cost,
            "assignment": [{"gpu": g, "bucket": list(b), "rps": v}
                           for (g, b), v in sorted(self.assignment.items())],
        }


# ---------------------------------------------------------------------------
# feasibility
# ---------------------------------------------------------------------------

def _pivot(T, row, col):
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[row]


def _run_simplex(T, basis, allowed, max_iter=10_000):
    """Bland's-rule pivoting on tableau ``T`` (objective in the last row)."""
    m = T.shape[0] - 1
    eps = 1e-12
    for _ in range(max_iter):
        entering = next((j for j in allowed if T[m, j] < -eps), None)
        if entering is None:
            return
        col = T[:m, entering]
        best, leave = None, None
        for i in range(m):
            if col[i] > eps:
                r = T[i, -1] / col[i]
                if best is None or r < best - eps or (abs(r - best) <= eps and basis[i] < basis[leave]):
                    best, leave = r, i
        if leave is None:
            return
        _pivot(T, leave, entering)
        basis[leave] = entering
    logger.warning("simplex iteration limit reached")


def _simplex(A: np.ndarray, rhs: np.ndarray, c: Optional[np.ndarray] = None):
    """Find ``x >= 0`` with ``A x = rhs`` (``rhs >= 0``), minimising ``c x``
    when ``c`` is given.  Returns None when infeasible."""
    m, n = A.shape
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = rhs
    T[m, :n] = -A.sum(axis=0)
    T[m, -1] = -rhs.sum()
    basis = list(range(n, n + m))
    _run_simplex(T, basis, range(n + m))
    if -T[m, -1] > FEAS_TOL * max(1.0, rhs.sum()):
        return None
    if c is not None:
        # drive zero-level artificials out of the basis; all-zero rows are redundant
        keep = []
        for i in range(m):
            if basis[i] >= n:
                j = next((j for j in range(n) if abs(T[i, j]) > 1e-9), None)
                if j is None:
                    continue
                _pivot(T, i, j)
                basis[i] = j
            keep.append(i)
        T = T[keep + [m]]
        basis = [basis[i] for i in keep]
        T[-1] = 0.0
        T[-1, :n] = c
        for i, j in enumerate(basis):
            if T[-1, j] != 0.0:
                T[-1] -= T[-1, j] * T[i]
        _run_simplex(T, basis, range(n))
    x = np.zeros(n + m)
    for i, j in enumerate(basis):
        x[j] = T[i, -1]
    return x[:n]


def _demand(histogram) -> dict:
    if isinstance(histogram, WorkloadHistogram):
        return histogram.demand()
    return {b: float(v) for b, v in dict(histogram).items() if v > 0}


def _cap_of(caps, g, b) -> float:
    if isinstance(caps, CapacityTable):
        return caps.get(g, b)
    return float(caps.get((g, b), 0.0))


def feasible(counts: dict, histogram, caps, costs: Optional[dict] = None):
    """Can ``histogram``'s demand be split over ``counts`` GPUs?

    Returns ``(ok, assignment)``; ``assignment`` maps ``(gpu, bucket)`` to
    req/s and satisfies coverage exactly and per-type load within 1e-9.
    With ``costs`` the witness also minimises cost-weighted GPU time, so
    each bucket leans on the type that serves it most cheaply.
    """
    if any(n < 0 for n in counts.values()):
        raise ValueError("counts must be >= 0")
    demand = _demand(histogram)
    if not demand:
        return True, {}
    types = sorted(g for g, n in counts.items() if n > 0)
    buckets = sorted(demand)
    pairs = [(g, b) for g in types for b in buckets if _cap_of(caps, g, b) > 0]
    for b in buckets:
        if not any(pb == b for _, pb in pairs):
            return False, {}
    # variables: y[g,b] (share of bucket b on type g) then one slack per type
    nv = len(pairs) + len(types)
    A = np.zeros((len(buckets) + len(types), nv))
    rhs = np.zeros(len(buckets) + len(types))
    bi = {b: i for i, b in enumerate(buckets)}
    gi = {g: i for i, g in enumerate(types)}
    for k, (g, b) in enumerate(pairs):
        A[bi[b], k] = 1.0
        A[len(buckets) + gi[g], k] = demand[b] / _cap_of(caps, g, b)
    for g, i in gi.items():
        A[len(buckets) + i, len(pairs) + i] = 1.0
        rhs[len(buckets) + i] = counts[g]
    rhs[:len(buckets)] = 1.0
    c = None
    if costs is not None:
        c = np.zeros(nv)
        for k, (g, b) in enumerate(pairs):
            c[k] = float(costs[g]) * demand[b] / _cap_of(caps, g, b)
    x = _simplex(A, rhs, c)
    if x is None:
        return False, {}
    share = {}
    for b in buckets:
        ks = [k for k, (_, pb) in enumerate(pairs) if pb == b]
        vals = np.clip(x[ks], 0.0, None)
        tot = vals.sum()
        if tot <= 0:
            return False, {}
        for k, v in zip(ks, vals / tot):
            share[pairs[k]] = v
    assignment = {(g, b): float(s * demand[b]) for (g, b), s in share.items() if s > 0}
    for g in types:
        load = sum(v / _cap_of(caps, g, b) for (gg, b), v in assignment.items() if gg == g)
        if load > counts[g] + FEAS_TOL:
            return False, {}
    return True, assignment


def check_plan(plan: AllocationPlan, histogram, caps, tol: float = FEAS_TOL) -> bool:
    demand = _demand(histogram)
    for b, d in demand.items():
        got = sum(v for (g, bb), v in plan.assignment.items() if bb == b)
        if abs(got - d) > tol * max(1.0, d):
            return False
    for g, n in plan.counts.items():
        load = 0.0
        for (gg, b), v in plan.assignment.items():
            if gg == g and v > 0:
                c = _cap_of(caps, g, b)
                if c <= 0:
                    return False
                load += v / c
        if load > n + tol:
            return False
    return all(v >= 0 for v in plan.assignment.values())


# ---------------------------------------------------------------------------
# branch and bound
# ---------------------------------------------------------------------------

def _useful_max(g, demand, caps) -> int:
    load = math.fsum(d / _cap_of(caps, g, b) for b, d in demand.items() if _cap_of(caps, g, b) > 0)
    return math.ceil(load - FEAS_TOL)


def solve(histogram, caps, costs: dict, bounds: Optional[dict] = None) -> AllocationPlan:
    """Cheapest integer GPU counts that can carry ``histogram``.

    ``costs`` maps GPU type to hourly cost; ``bounds`` maps type to
    ``(min, max)`` (``max`` may be None).  Count vectors are popped from a
    heap in exact cost order; each is generated once by only incrementing
    positions at or after the last incremented one.
    """
    demand = _demand(histogram)
    types = sorted(costs)
    bounds = bounds or {}
    if not demand:
        return AllocationPlan()
    for b in sorted(demand):
        if not any(_cap_of(caps, g, b) > 0 and (bounds.get(g, (0, None))[1] != 0) for g in types):
            raise InfeasibleError(f"bucket {b} has no GPU type able to serve it")
    lo, hi = [], []
    for g in types:
        lg, hg = bounds.get(g, (0, None))
        lg = lg or 0
        useful = _useful_max(g, demand, caps)
        hg = useful if hg is None else min(hg, useful)
        lo.append(lg)
        hi.append(max(hg, lg))
    cost = [Fraction(costs[g]) for g in types]
    if cost and min(cost) < 0:
        raise ValueError("costs must be >= 0")
    top = dict(zip(types, hi))
    ok, _ = feasible(top, demand, caps)
    if not ok:
        worst = max(sorted(demand), key=lambda b: demand[b] / max(
            1e-300, sum(_cap_of(caps, g, b) * top[g] for g in types)))
        raise InfeasibleError(f"bucket {worst} demand {demand[worst]:.3g} req/s exceeds "
                              "capacity at the maximum allowed counts")

    start = tuple(lo)
    heap = [(sum(c * n for c, n in zip(cost, start)), start, 0)]
    explored = 0
    while heap:
        total, vec, last = heapq.heappop(heap)
        explored += 1
        counts = dict(zip(types, vec))
        ok, _ = feasible(counts, demand, caps)
        if ok:
            _, assignment = feasible(counts, demand, caps, costs)
            counts = {g: n for g, n in counts.items() if n > 0}
            return AllocationPlan(counts, assignment, float(total), total, explored)
        for i in range(last, len(types)):
            if vec[i] < hi[i]:
                nxt = vec[:i] + (vec[i] + 1,) + vec[i + 1:]
                heapq.heappush(heap, (total + cost[i], nxt, i))
    raise InfeasibleError("no feasible GPU mix within bounds")  # unreachable: top is feasible


def brute_force(histogram, caps, costs: dict, max_count: int):
    """Exhaustive reference: cheapest feasible vector with every count <= max_count."""
    import itertools
    demand = _demand(histogram)
    types = sorted(costs)
    best = None
    for vec in itertools.product(range(max_count + 1), repeat=len(types)):
        c = sum(Fraction(costs[g]) * n for g, n in zip(types, vec))
        if best is not None and c >= best:
            continue
        if feasible(dict(zip(types, vec)), demand, caps)[0]:
            best = c
    return best


# ---------------------------------------------------------------------------
# load monitor
# ---------------------------------------------------------------------------

def monitor(admissions, edges_in, edges_out, window: float, now: float) -> WorkloadHistogram:
    """Bucket the admissions ``(t, prompt_len, output_len)`` seen in ``[now - window, now]``."""
    cutoff = now - window
    recent = [SimpleNamespace(prompt_len=p, output_len=o)
              for t, p, o in admissions if cutoff <= t <= now]
    return bucketize(recent, edges_in, edges_out, duration=window)


# ---------------------------------------------------------------------------
# profiling
# ---------------------------------------------------------------------------

def saturation_rate(gpu: GpuProfile, in_len: int, out_len: int) -> float:
    """Requests/s one instance sustains with prefill serialized and decode
    batched as wide as batch and KV room allow."""
    batch = max(1, min(gpu.batch_capacity, gpu.kv_capacity // (in_len + out_len)))
    per_req = prefill_time(gpu, in_len) + out_len * decode_step_time(gpu, batch) / batch
    return 1.0 / per_req


def _probe_trace(in_len, out_len, rate, n, seed, gaps):
    arrivals = np.cumsum(gaps) / rate
    reqs = [Request(id=i, arrival=float(arrivals[i]), model="base",
                    prompt=synth_tokens(in_len, seed * 1_000_003 + i), output_len=out_len)
            for i in range(n)]
    return RequestTrace(reqs, {"source": "profile"})


def _probe_config(gpu: GpuProfile, chunked: bool):
    from .config import Deployment, EngineConfig, ScenarioConfig
    return ScenarioConfig(name=f"profile-{gpu.name}", profiles={gpu.name: gpu},
                          deployments=[Deployment("profile", gpu.name, 1)],
                          engine=EngineConfig(prefix_caching=False, chunked_prefill=chunked))


def profile_capacity(gpu: GpuProfile, in_len: int, out_len: int, slo: float,
                     metric: str = "ttft", n: int = 200, seed: int = 0, tol: float = 0.01,
                     chunked: bool = False):
    """Largest arrival rate whose p99 ``metric`` stays within ``slo``.

    Binary search between 0 and the saturation rate on one simulated
    instance, using the same unit-rate exponential gaps scaled by each probe
    rate.  Returns ``(rps, status)``.
    """
    from .simengine import percentile, run
    if slo <= 0:
        raise ValueError("slo must be > 0")
    if metric not in ("ttft", "e2e"):
        raise ValueError("metric must be 'ttft' or 'e2e'")
    if in_len + out_len > gpu.kv_capacity:
        logger.warning("%s: %d+%d tokens exceed KV capacity", gpu.name, in_len, out_len)
        return 0.0, "unattainable"
    alone = prefill_time(gpu, in_len)
    if metric == "e2e":
        alone += out_len * decode_step_time(gpu, 1)
    if alone > slo:
        logger.warning("%s: SLO %.3gs unattainable for (%d, %d); isolated request takes %.3gs",
                       gpu.name, slo, in_len, out_len, alone)
        return 0.0, "unattainable"
    gaps = np.random.default_rng(seed).exponential(1.0, size=n)
    cfg = _probe_config(gpu, chunked)

    def ok(rate):
        report = run(cfg, _probe_trace(in_len, out_len, rate, n, seed, gaps))
        lat = [r.ttft if metric == "ttft" else r.e2e for r in report.records
               if r.status == "completed"]
        return len(lat) == n and percentile(lat, 99) <= slo

    hi = saturation_rate(gpu, in_len, out_len)
    if ok(hi):
        return hi, "saturation"
    lo = 0.0
    while hi - lo > tol * hi:
        mid = (lo + hi) / 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo, "ok"


def build_capacity_table(profiles: dict, edges_in, edges_out, slo: float, metric: str = "ttft",
                         n: int = 200, seed: int = 0, chunked: bool = False) -> CapacityTable:
    table = CapacityTable()
    for name in sorted(profiles):
        gpu = profiles[name]
        for i in range(len(edges_in)):
            for j in range(len(edges_out)):
                in_len = bucket_representative(edges_in, i)
                out_len = bucket_representative(edges_out, j)
                rps, status = profile_capacity(gpu, in_len, out_len, slo, metric, n, seed,
                                               chunked=chunked)
                table.set(name, (i, j), rps, status, (in_len, out_len))
    return table

"""Independent reference implementations used by the tests."""
import itertools
from fractions import Fraction

import numpy as np


def naive_route(kind, cands, snaps, cached_blocks, prompt_keys, prompt_len, block_size,
                threshold, fallback, overload_factor, rng_seed):
    """Full-scan router.  ``cached_blocks`` maps instance id to a set of hashes."""
    order = sorted(cands)

    def pick(k):
        if k == "random":
            return order[int(np.random.default_rng(rng_seed).integers(len(order)))]
        field = {"throughput": "throughput", "least-request": "inflight",
                 "least-kv-cache": "kv_util", "least-latency": "latency"}[k]
        values = [getattr(snaps[i], field) for i in order]
        lowest = min(values)
        return order[values.index(lowest)]

    if kind != "prefix-cache-aware":
        return pick(kind)
    ratios = []
    for i in order:
        n = 0
        for h in prompt_keys:
            if h not in cached_blocks.get(i, set()):
                break
            n += 1
        ratios.append(n * block_size / prompt_len)
    top = max(ratios)
    best = order[ratios.index(top)]
    if top > 0 and top >= threshold:
        depths = sorted(snaps[i].queue_depth for i in order)
        m = len(depths)
        median = depths[m // 2] if m % 2 else (depths[m // 2 - 1] + depths[m // 2]) / 2
        if snaps[best].queue_depth > overload_factor * median:
            return pick(fallback)
        return best
    return pick(fallback)


def lp_feasible(counts, demand, caps):
    """Feasibility of the fractional split via scipy's HiGHS LP."""
    from scipy.optimize import linprog
    types = sorted(g for g, n in counts.items() if n > 0)
    buckets = sorted(b for b, d in demand.items() if d > 0)
    if not buckets:
        return True
    pairs = [(g, b) for g in types for b in buckets if caps.get((g, b), 0) > 0]
    if not pairs:
        return False
    A_eq = np.zeros((len(buckets), len(pairs)))
    A_ub = np.zeros((len(types), len(pairs)))
    for k, (g, b) in enumerate(pairs):
        A_eq[buckets.index(b), k] = 1.0
        A_ub[types.index(g), k] = demand[b] / caps[(g, b)]
    res = linprog(np.zeros(len(pairs)), A_ub=A_ub, b_ub=[counts[g] for g in types],
                  A_eq=A_eq, b_eq=np.ones(len(buckets)), bounds=(0, None), method="highs")
    return res.status == 0


def brute_force_cost(demand, caps, costs, max_count, feasible=lp_feasible):
    types = sorted(costs)
    best = None
    for vec in itertools.product(range(max_count + 1), repeat=len(types)):
        c = sum(Fraction(costs[g]) * n for g, n in zip(types, vec))
        if best is not None and c >= best:
            continue
        if feasible(dict(zip(types, vec)), demand, caps):
            best = c
    return best


def grid_feasible(counts, demand, caps, step=1e-3, slack=0.0):
    """Grid search over split fractions for two types and up to two buckets.

    Type ``a`` takes share ``s_b`` of bucket ``b`` and type ``b`` the rest.
    ``slack`` loosens both capacity checks, so a strict and a relaxed call
    bracket the exact answer.
    """
    ta, tb = sorted(counts)
    buckets = sorted(b for b, d in demand.items() if d > 0)
    grid = np.round(np.arange(0.0, 1.0 + step / 2, step), 12)
    axes = np.meshgrid(*([grid] * len(buckets)), indexing="ij")
    load_a = np.zeros(axes[0].shape)
    load_b = np.zeros(axes[0].shape)
    for b, share in zip(buckets, axes):
        ca, cb = caps.get((ta, b), 0.0), caps.get((tb, b), 0.0)
        load_a = load_a + (np.where(share > 0, np.inf, 0.0) if ca <= 0 else share * demand[b] / ca)
        load_b = load_b + (np.where(share < 1, np.inf, 0.0) if cb <= 0 else (1 - share) * demand[b] / cb)
    ok = (load_a <= counts[ta] + 1e-9 + slack) & (load_b <= counts[tb] + 1e-9 + slack)
    return bool(ok.any())


def naive_window_mean(samples, now, span):
    kept = [Fraction(v) for t, v in samples if now - span <= t <= now]
    if not kept:
        return 0.0
    return float(sum(kept)) / len(kept)

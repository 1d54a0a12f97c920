import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fleetsim.cluster import DEFAULT_PROFILES, AdapterSpec, Fleet
from fleetsim.gateway import (ADMITTED, POLICIES, REJECTED_RPM, REJECTED_TPM, GatewayStats,
                              InstanceSnapshot, RateLimiter, RoutingPolicy, TokenBucket,
                              candidates, decide, record_outcome)
from fleetsim.kvcache import PrefixCache, chain
from fleetsim.workload import Request

from oracles import naive_route

BS = 16


def req(n=32, out=8, adapter=None, seed=0):
    toks = tuple(np.random.default_rng(seed).integers(0, 32000, n).tolist())
    return Request(0, 0.0, "base", toks, out, adapter=adapter)


def test_token_bucket_refill():
    b = TokenBucket(600, now=0.0)
    b.fill = 0.0
    b.refill(30.0)
    assert b.fill == pytest.approx(300.0)
    b.refill(1000.0)
    assert b.fill == 600.0


def test_rate_limiter_tpm_then_rpm():
    lim = RateLimiter({"base": {"tpm": 100, "rpm": 2}})
    r = req(40, 10)
    assert lim.admit("base", r, 0.0) == ADMITTED
    assert lim.admit("base", r, 0.0) == ADMITTED
    assert lim.admit("base", r, 0.0) == REJECTED_TPM
    lim2 = RateLimiter({"*": {"rpm": 1}})
    assert lim2.admit("x", r, 0.0) == ADMITTED
    assert lim2.admit("x", r, 0.0) == REJECTED_RPM
    assert lim2.admit("y", r, 0.0) == ADMITTED


def test_unlimited_tenant():
    assert RateLimiter({"a": {"tpm": 1}}).admit("b", req(), 0.0) == ADMITTED


@given(st.lists(st.tuples(st.floats(0, 5), st.integers(1, 300)), max_size=200))
def test_buckets_never_negative(steps):
    lim = RateLimiter({"*": {"tpm": 1000, "rpm": 30}})
    now = 0.0
    for dt, n in steps:
        now += dt
        lim.admit("t", req(n, 1), now)
        tpm, rpm = lim.buckets["t"]
        assert tpm.fill >= 0 and rpm.fill >= 0


def test_candidates_filter_adapter_and_health():
    f = Fleet()
    for _ in range(3):
        f.add_instance(DEFAULT_PROFILES["A10"], "base", "d")
    f.add_instance(DEFAULT_PROFILES["A10"], "other", "d")
    iid, _ = f.register_adapter(AdapterSpec("sql", "base"))
    f.finish_adapter_load("sql", iid)
    assert candidates(f, req()) == [0, 1, 2]
    assert candidates(f, req(adapter="sql")) == [iid]
    f.instances[1].draining = True
    assert candidates(f, req()) == [0, 2]


def test_prefix_threshold_and_fallback():
    r = req(64)
    keys = chain(r.prompt, BS)
    caches = {0: PrefixCache(1000, BS), 1: PrefixCache(1000, BS)}
    caches[1].insert(keys[:2])   # 50% of the prompt
    snaps = {i: InstanceSnapshot(0.0, 5 - i, 0.0, 0.0, 0) for i in (0, 1)}
    pol = RoutingPolicy("prefix-cache-aware", prefix_threshold=0.5)
    assert decide(pol, r, [0, 1], snaps, caches, keys=keys) == (1, "prefix-hit")
    pol = RoutingPolicy("prefix-cache-aware", prefix_threshold=0.75)
    iid, reason = decide(pol, r, [0, 1], snaps, caches, keys=keys)
    assert reason.startswith("fallback") and iid == 1   # fewest in-flight


def test_prefix_overload_guard():
    r = req(64)
    keys = chain(r.prompt, BS)
    caches = {i: PrefixCache(1000, BS) for i in range(3)}
    caches[2].insert(keys)
    snaps = {0: InstanceSnapshot(0, 1, 0, 0, 1), 1: InstanceSnapshot(0, 0, 0, 0, 1),
             2: InstanceSnapshot(0, 9, 0, 0, 9)}
    iid, reason = decide(RoutingPolicy("prefix-cache-aware"), r, [0, 1, 2], snaps, caches,
                         keys=keys)
    assert reason.startswith("overloaded") and iid == 1


def test_stats_window_throughput():
    st_ = GatewayStats(window=10.0)
    record_outcome(st_, 0, None, 0.1, 0.4, 100, now=1.0)
    record_outcome(st_, 0, None, 0.1, 0.4, 100, now=5.0)
    assert st_.get(0).throughput(5.0) == pytest.approx(20.0)
    assert st_.get(0).throughput(12.0) == pytest.approx(10.0)
    assert st_.get(0).avg_latency(5.0) == pytest.approx(0.5)


def _random_case(rng):
    n = int(rng.integers(1, 7))
    cands = sorted(rng.choice(20, size=n, replace=False).tolist())
    snaps = {i: InstanceSnapshot(float(rng.integers(0, 3)), int(rng.integers(0, 3)),
                                 float(rng.integers(0, 3)) / 2, float(rng.integers(0, 3)),
                                 int(rng.integers(0, 4))) for i in cands}
    prompt_blocks = int(rng.integers(1, 9))
    r = req(prompt_blocks * BS + int(rng.integers(0, BS)), seed=int(rng.integers(1 << 30)))
    keys = chain(r.prompt, BS)
    caches, blocks = {}, {}
    for i in cands:
        c = PrefixCache(1000 * BS, BS)
        c.insert(keys[:int(rng.integers(0, len(keys) + 1))])
        caches[i] = c
        blocks[i] = set(c.keys())
    return r, keys, cands, snaps, caches, blocks


@pytest.mark.parametrize("kind", POLICIES)
def test_policies_match_naive_oracle(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for case in range(300):
        r, keys, cands, snaps, caches, blocks = _random_case(rng)
        thr = float(rng.choice([0.0, 0.25, 0.5, 0.9]))
        fb = str(rng.choice(["least-request", "throughput", "random"]))
        pol = RoutingPolicy(kind, prefix_threshold=thr, fallback=fb, seed=case)
        got, _ = decide(pol, r, cands, snaps, caches, keys=keys, block_size=BS)
        want = naive_route(kind, cands, snaps, blocks, keys, r.prompt_len, BS, thr, fb, 2.0, case)
        assert got == want

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fleetsim.cluster import DEFAULT_PROFILES, Instance
from fleetsim.kvcache import KvPool, LruPool, PrefixCache, apply_prefill, chain, make_pool

BS = 16


def toks(n, seed):
    return np.random.default_rng(seed).integers(0, 32000, n).tolist()


def test_chain_shares_prefix_keys():
    base = toks(160, 1)
    a = chain(base + toks(40, 2), BS)
    b = chain(base + toks(40, 3), BS)
    assert a[:10] == b[:10]
    assert a[10] != b[10]


def test_chain_depends_on_position_and_parent():
    blk = toks(BS, 5)
    assert chain(blk + blk, BS)[0] != chain(blk + blk, BS)[1]
    assert chain(toks(BS, 6) + blk, BS)[1] != chain(toks(BS, 7) + blk, BS)[1]


def test_partial_block_dropped():
    assert len(chain(toks(BS * 3 + 5, 1), BS)) == 3
    assert chain(toks(5, 1), BS) == []


def test_prefix_cache_match_and_lru():
    c = PrefixCache(capacity_tokens=4 * BS, block_size=BS)
    a = chain(toks(3 * BS, 1), BS)
    c.insert(a)
    assert c.match(a) == 3 * BS
    b = chain(toks(3 * BS, 2), BS)
    c.insert(b)
    assert len(c) == 4 and c.is_prefix_closed()
    assert c.match(b) == 3 * BS
    assert c.match(a) == BS   # a's tail went first


chains = st.lists(st.tuples(st.integers(0, 7), st.integers(1, 12), st.integers(0, 3)),
                  min_size=1, max_size=60)


def _chain_for(stem, length, branch):
    # shared stems with per-branch tails, so chains overlap in prefixes
    return chain(toks(BS * 6, stem) + toks(BS * 6, 1000 + stem * 10 + branch), BS)[:length]


@given(chains, st.integers(1, 40))
def test_prefix_cache_stays_closed(ops, cap_blocks):
    c = PrefixCache(cap_blocks * BS, BS)
    for stem, length, branch in ops:
        keys = _chain_for(stem, length, branch)
        hit = c.match(keys)
        c.touch(keys, hit // BS)
        c.insert(keys)
        assert c.is_prefix_closed()
        assert len(c) <= cap_blocks


@given(chains, st.integers(1, 40), st.integers(0, 20), st.booleans())
def test_pool_stays_closed(ops, main_blocks, prob_blocks, fetch_first):
    p = KvPool(main_blocks * BS, prob_blocks * BS, 1e5, 0.001, BS)
    for stem, length, branch in ops:
        keys = _chain_for(stem, length, branch)
        if fetch_first:
            p.fetch(keys)
        p.insert(keys)
        assert p.is_prefix_closed()
        assert len(p.main) <= main_blocks and len(p.probation) <= prob_blocks


def test_pool_second_access_promotes():
    p = KvPool(100 * BS, 10 * BS, 1e5, 0.0, BS)
    keys = chain(toks(4 * BS, 1), BS)
    p.insert(keys)
    assert all(p.segment(k) == "probation" for k in keys)
    hit, _ = p.fetch(keys)
    assert hit == 4 * BS
    assert all(p.segment(k) == "main" for k in keys)


@pytest.mark.parametrize("prob_blocks", [1, 8, 64])
def test_scan_resistance(prob_blocks):
    p = KvPool(32 * BS, prob_blocks * BS, 1e5, 0.0, BS)
    hot = chain(toks(8 * BS, 1), BS)
    for k in range(1, len(hot) + 1):   # grow block by block so any probation size admits it
        p.insert(hot[:k])
        p.fetch(hot[:k])
    assert all(p.segment(h) == "main" for h in hot)
    before = {k: list(v) for k, v in p.main.items()}
    for s in range(500):
        p.insert(chain(toks(4 * BS, 10_000 + s), BS))
    assert {k: list(v) for k, v in p.main.items()} == before
    assert p.match(hot) == 8 * BS


def test_lru_pool_is_not_scan_resistant():
    p = LruPool(32 * BS, 1e5, 0.0, BS)
    hot = chain(toks(8 * BS, 1), BS)
    p.insert(hot)
    p.fetch(hot)
    for s in range(100):
        p.insert(chain(toks(4 * BS, 10_000 + s), BS))
    assert p.match(hot) == 0


def test_transfer_time():
    p = make_pool("2q", capacity_tokens=1000, probation_tokens=100, bandwidth=1000.0, rtt=0.01,
                  block_size=BS)
    assert p.transfer_time(0) == 0.0
    assert p.transfer_time(500) == pytest.approx(0.51)


def test_apply_prefill_split():
    a10 = DEFAULT_PROFILES["A10"]
    inst = Instance(0, a10, "base", "d", local_cache=PrefixCache(10 * BS, BS))
    pool = KvPool(100 * BS, 10 * BS, 1e4, 0.002, BS)
    prompt = toks(6 * BS + 3, 1)
    keys = chain(prompt, BS)
    inst.local_cache.insert(keys[:2])
    pool.insert(keys[:5])
    out = apply_prefill(inst, pool, keys, len(prompt))
    assert out.local_hit == 2 * BS
    assert out.remote_hit == 3 * BS
    assert out.transfer_time == pytest.approx(0.002 + 3 * BS / 1e4)
    assert out.compute_time == pytest.approx((len(prompt) - 5 * BS) / a10.prefill_rate)


def test_full_local_hit_skips_pool():
    a10 = DEFAULT_PROFILES["A10"]
    inst = Instance(0, a10, "base", "d", local_cache=PrefixCache(10 * BS, BS))
    pool = KvPool(100 * BS, 10 * BS, 1e4, 0.002, BS)
    keys = chain(toks(4 * BS, 1), BS)
    inst.local_cache.insert(keys)
    out = apply_prefill(inst, pool, keys, 4 * BS)
    assert out.remote_hit == 0 and pool.fetches == 0 and out.duration == 0.0


def test_insert_with_start_keeps_closure():
    p = KvPool(64 * BS, 16 * BS, 1e5, 0.0, BS)
    keys = chain(toks(4 * BS, 5), BS)
    p.insert(keys)                  # all four on probation
    p.insert(keys, start=2)         # first two skipped, last two must not be promoted
    assert p.is_prefix_closed()
    assert all(p.segment(k) == "probation" for k in keys)
    p.fetch(keys)
    assert all(p.segment(k) == "main" for k in keys)


@given(chains, st.integers(1, 40), st.integers(0, 20), st.lists(st.integers(0, 12), min_size=60, max_size=60))
def test_pool_closed_with_partial_inserts(ops, main_blocks, prob_blocks, starts):
    p = KvPool(main_blocks * BS, prob_blocks * BS, 1e5, 0.001, BS)
    for (stem, length, branch), start in zip(ops, starts):
        keys = _chain_for(stem, length, branch)
        if branch == 0:
            p.fetch(keys)
        p.insert(keys, start=start)
        assert p.is_prefix_closed()

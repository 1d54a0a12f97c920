"""Block-hashed prefix caches and the distributed KV pool.

Caches are keyed by 64-bit chained block hashes.  A block is present only
if its whole parent chain is present (prefix closure), so a prefix match is
the length of the leading run of present keys.
"""
from __future__ import annotations

import heapq
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import _kernels
from .cluster import prefill_time

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 16


class BlockKey(NamedTuple):
    hash: int
    depth: int


def chain(tokens, block_size: int = DEFAULT_BLOCK_SIZE) -> list:
    """Chained block hashes as plain ints; trailing partial block dropped."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    arr = np.asarray(tokens, dtype=np.int64)
    return _kernels.chain_hashes(arr, block_size).tolist()


def block_keys(tokens, block_size: int = DEFAULT_BLOCK_SIZE) -> list:
    return [BlockKey(h, d) for d, h in enumerate(chain(tokens, block_size))]


def _hashes(keys) -> list:
    return [k.hash if isinstance(k, BlockKey) else k for k in keys]


def match_prefix(cache, keys) -> int:
    """Tokens covered by the longest leading run of ``keys`` present in ``cache``."""
    n = 0
    for h in _hashes(keys):
        if h not in cache:
            break
        n += 1
    return n * cache.block_size


class PrefixCache:
    """Per-instance prefix cache with LRU eviction at chain tails.

    Touching a chain refreshes it tail-first, so a parent is always at least
    as recent as any of its cached children; the least recent block is then
    always a chain tail and can be evicted without breaking prefix closure.
    """

    def __init__(self, capacity_tokens: int, block_size: int = DEFAULT_BLOCK_SIZE):
        if capacity_tokens < 0:
            raise ValueError("capacity must be >= 0")
        self.block_size = block_size
        self.capacity_tokens = capacity_tokens
        self.capacity_blocks = capacity_tokens // block_size
        self._blocks: OrderedDict = OrderedDict()  # hash -> parent hash
        self.evictions = 0
        self.inserted = 0

    def __contains__(self, h) -> bool:
        return h in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    @property
    def tokens(self) -> int:
        return len(self._blocks) * self.block_size

    def keys(self):
        return list(self._blocks)

    def match(self, keys) -> int:
        return match_prefix(self, keys)

    def touch(self, keys, n_blocks: Optional[int] = None) -> None:
        hs = _hashes(keys)
        if n_blocks is not None:
            hs = hs[:n_blocks]
        blocks = self._blocks
        for h in reversed(hs):
            if h in blocks:
                blocks.move_to_end(h)

    def insert(self, keys) -> None:
        hs = _hashes(keys)
        blocks = self._blocks
        for i in range(len(hs) - 1, -1, -1):
            h = hs[i]
            if h in blocks:
                blocks.move_to_end(h)
            else:
                blocks[h] = hs[i - 1] if i > 0 else None
                self.inserted += 1
        while len(blocks) > self.capacity_blocks:
            blocks.popitem(last=False)
            self.evictions += 1

    def is_prefix_closed(self) -> bool:
        return all(p is None or p in self._blocks for p in self._blocks.values())

    def stats(self) -> dict:
        return {"blocks": len(self._blocks), "tokens": self.tokens,
                "capacity_tokens": self.capacity_tokens, "evictions": self.evictions}


class _PoolTransfer:
    """Transfer-cost model shared by pool implementations."""

    bandwidth: float
    rtt: float

    def transfer_time(self, tokens: int) -> float:
        if tokens <= 0:
            return 0.0
        return self.rtt + tokens / self.bandwidth


class KvPool(_PoolTransfer):
    """Distributed KV pool with 2Q admission.

    New blocks land in a small FIFO probation segment.  A block accessed
    again while on probation moves to the main segment, which evicts the
    chain tail with the lowest ``(access_count, last_touch)``.  One-shot
    scans therefore cycle through probation without disturbing main.
    """

    policy = "2q"

    def __init__(self, capacity_tokens: int, probation_tokens: int,
                 bandwidth: float, rtt: float, block_size: int = DEFAULT_BLOCK_SIZE):
        if bandwidth <= 0 or rtt < 0:
            raise ValueError("pool needs bandwidth > 0 and rtt >= 0")
        self.block_size = block_size
        self.capacity_tokens = capacity_tokens
        self.probation_tokens = probation_tokens
        self.main_cap = capacity_tokens // block_size
        self.prob_cap = probation_tokens // block_size
        self.bandwidth = float(bandwidth)
        self.rtt = float(rtt)
        self.probation: OrderedDict = OrderedDict()   # hash -> parent
        self.main: dict = {}                         # hash -> [count, touch, parent]
        self._kids: dict = {}                        # hash -> set of child hashes (both segments)
        self._main_kids: dict = {}                   # hash -> number of children in main
        self._heap: list = []
        self._clock = 0
        self.evictions = 0
        self.promotions = 0
        self.fetches = 0
        self.hit_tokens = 0

    def __contains__(self, h) -> bool:
        return h in self.main or h in self.probation

    def segment(self, h) -> Optional[str]:
        if h in self.main:
            return "main"
        if h in self.probation:
            return "probation"
        return None

    @property
    def tokens(self) -> int:
        return len(self.main) * self.block_size

    # -- bookkeeping ------------------------------------------------------

    def _link(self, h, parent):
        if parent is not None:
            self._kids.setdefault(parent, set()).add(h)

    def _unlink(self, h, parent):
        if parent is not None:
            kids = self._kids.get(parent)
            if kids is not None:
                kids.discard(h)
                if not kids:
                    del self._kids[parent]

    def _push(self, h):
        count, touch, _ = self.main[h]
        heapq.heappush(self._heap, (count, touch, h))

    def _main_access(self, h):
        self._clock += 1
        entry = self.main[h]
        entry[0] += 1
        entry[1] = self._clock
        if not self._main_kids.get(h):
            self._push(h)

    def _promote(self, h):
        parent = self.probation.pop(h)
        self._clock += 1
        self.main[h] = [2, self._clock, parent]
        if parent is not None:
            self._main_kids[parent] = self._main_kids.get(parent, 0) + 1
        self.promotions += 1
        if not self._main_kids.get(h):
            self._push(h)

    def _drop_probation_subtree(self, h):
        stack = [h]
        while stack:
            k = stack.pop()
            if k in self.probation:
                self._unlink(k, self.probation.pop(k))
                self.evictions += 1
            stack.extend(self._kids.pop(k, ()))

    def _evict_main(self):
        while len(self.main) > self.main_cap:
            count, touch, h = heapq.heappop(self._heap)
            entry = self.main.get(h)
            if entry is None or entry[0] != count or entry[1] != touch or self._main_kids.get(h):
                continue
            del self.main[h]
            parent = entry[2]
            self._unlink(h, parent)
            self._main_kids.pop(h, None)
            self.evictions += 1
            # children left in probation would dangle; drop them too
            for kid in list(self._kids.pop(h, ())):
                self._drop_probation_subtree(kid)
            if parent is not None and parent in self.main:
                self._main_kids[parent] -= 1
                if not self._main_kids[parent]:
                    del self._main_kids[parent]
                    self._push(parent)
        if len(self._heap) > 4 * len(self.main) + 64:
            self._heap = [(e[0], e[1], k) for k, e in self.main.items()
                          if not self._main_kids.get(k)]
            heapq.heapify(self._heap)

    def _evict_probation(self):
        while len(self.probation) > self.prob_cap:
            h, parent = next(iter(self.probation.items()))
            if self._kids.get(h):
                self._drop_probation_subtree(h)
            else:
                del self.probation[h]
                self._unlink(h, parent)
                self.evictions += 1

    # -- public API -------------------------------------------------------

    def match(self, keys) -> int:
        return match_prefix(self, keys)

    def fetch(self, keys):
        hs = _hashes(keys)
        n = 0
        for h in hs:
            if h in self.main:
                self._main_access(h)
            elif h in self.probation:
                self._promote(h)
            else:
                break
            n += 1
        self._evict_main()
        self.fetches += 1
        hit = n * self.block_size
        self.hit_tokens += hit
        return hit, self.transfer_time(hit)

    def insert(self, keys, start: int = 0) -> None:
        """Record an access to ``keys``; the first ``start`` keys are only
        checked for presence, not counted as a fresh access."""
        hs = _hashes(keys)
        i = 0
        held = False   # a skipped ancestor is still on probation
        for h in hs:
            if i < start and h in self:
                held = held or h in self.probation
            elif held and h in self.probation:
                pass   # promoting would leave a main block under a probation parent
            elif h in self.main:
                self._main_access(h)
            elif h in self.probation:
                self._promote(h)
            else:
                break
            i += 1
        # absent keys always form a suffix of the chain
        for j in range(len(hs) - 1, i - 1, -1):
            parent = hs[j - 1] if j > 0 else None
            self.probation[hs[j]] = parent
            self._link(hs[j], parent)
        self._evict_probation()
        self._evict_main()

    def is_prefix_closed(self) -> bool:
        for h, (_, _, parent) in self.main.items():
            if parent is not None and parent not in self.main:
                return False
        for h, parent in self.probation.items():
            if parent is not None and parent not in self:
                return False
        return not (set(self.main) & set(self.probation))

    def stats(self) -> dict:
        return {
            "policy": self.policy,
            "main_blocks": len(self.main),
            "probation_blocks": len(self.probation),
            "capacity_tokens": self.capacity_tokens,
            "probation_tokens": self.probation_tokens,
            "evictions": self.evictions,
            "promotions": self.promotions,
            "fetches": self.fetches,
            "hit_tokens": self.hit_tokens,
        }


class LruPool(PrefixCache, _PoolTransfer):
    """Baseline pool: a single LRU segment with the same transfer model."""

    policy = "lru"

    def __init__(self, capacity_tokens: int, bandwidth: float, rtt: float,
                 block_size: int = DEFAULT_BLOCK_SIZE, **_):
        super().__init__(capacity_tokens, block_size)
        self.bandwidth = float(bandwidth)
        self.rtt = float(rtt)
        self.fetches = 0
        self.hit_tokens = 0

    def insert(self, keys, start: int = 0) -> None:
        super().insert(keys)

    def fetch(self, keys):
        hit = self.match(keys)
        self.touch(keys, hit // self.block_size)
        self.fetches += 1
        self.hit_tokens += hit
        return hit, self.transfer_time(hit)

    def stats(self) -> dict:
        d = super().stats()
        d.update(policy=self.policy, fetches=self.fetches, hit_tokens=self.hit_tokens)
        return d


def make_pool(policy: str = "2q", **kwargs):
    if policy == "2q":
        return KvPool(**kwargs)
    if policy == "lru":
        kwargs.pop("probation_tokens", None)
        return LruPool(**kwargs)
    raise ValueError(f"unknown pool policy {policy!r}")


def pool_fetch(pool, keys):
    return pool.fetch(keys)


def pool_insert(pool, keys) -> None:
    pool.insert(keys)


@dataclass
class PrefillOutcome:
    local_hit: int
    remote_hit: int
    transfer_time: float
    compute_time: float

    @property
    def duration(self) -> float:
        return self.transfer_time + self.compute_time


def apply_prefill(instance, pool, keys: Sequence, prompt_len: int,
                  local_enabled: bool = True) -> PrefillOutcome:
    """Split a prompt into local hits, pool hits and recomputed tokens.

    Only the lookup side runs here; the engine inserts the prompt's blocks
    into both caches once prefill finishes (see :func:`commit_prefill`).
    """
    hs = _hashes(keys)
    local_hit = 0
    if local_enabled and instance.local_cache is not None:
        local_hit = instance.local_cache.match(hs)
        instance.local_cache.touch(hs, local_hit // instance.local_cache.block_size)
    remote_hit, transfer = 0, 0.0
    if pool is not None and local_hit < len(hs) * pool.block_size:
        total, _ = pool.fetch(hs)
        remote_hit = max(0, total - local_hit)
        transfer = pool.transfer_time(remote_hit)
    compute = prefill_time(instance.effective_gpu, prompt_len - local_hit - remote_hit)
    return PrefillOutcome(local_hit, remote_hit, transfer, compute)


def commit_prefill(instance, pool, keys, local_enabled: bool = True) -> None:
    if local_enabled and instance.local_cache is not None:
        instance.local_cache.insert(keys)
    if pool is not None:
        pool.insert(keys)

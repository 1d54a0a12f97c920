"""Numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and the environment
variable ``FLEETSIM_NUMBA`` is not set to ``0``.  Both paths produce
bit-identical results; ``tests/test_kernels.py`` checks this.
"""
import math
import os

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
POS_SALT = 0xD6E8FEB86659FD93
ROOT_SEED = 0x243F6A8885A308D3


def _want_numba():
    flag = os.environ.get("FLEETSIM_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


try:
    import numba as nb
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba ships as the optional "fast" extra
    nb = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _want_numba()


# ---------------------------------------------------------------------------
# pure numpy / python reference path
# ---------------------------------------------------------------------------

def _splitmix_np(z):
    # uint64 arrays wrap silently on overflow
    z = z + np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def _splitmix_int(x):
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def chain_hashes_numpy(tokens, block_size):
    tokens = np.asarray(tokens, dtype=np.int64)
    n_blocks = tokens.shape[0] // block_size
    out = np.empty(n_blocks, dtype=np.uint64)
    if n_blocks == 0:
        return out
    body = tokens[: n_blocks * block_size].astype(np.uint64)
    salt = np.arange(block_size, dtype=np.uint64) * np.uint64(POS_SALT)
    mixed = _splitmix_np(body.reshape(n_blocks, block_size) ^ salt)
    content = mixed.sum(axis=1, dtype=np.uint64)
    parent = ROOT_SEED
    for i, c in enumerate(content.tolist()):
        parent = _splitmix_int(parent ^ c)
        out[i] = parent
    return out


def nearest_rank_numpy(samples, p):
    arr = np.asarray(samples, dtype=np.float64)
    n = arr.shape[0]
    rank = max(1, int(math.ceil(p / 100.0 * n)))
    return float(np.partition(arr, rank - 1)[rank - 1])


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @nb.njit(cache=True)
    def _splitmix_nb(x):
        z = x + np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        return z ^ (z >> np.uint64(31))

    @nb.njit(cache=True)
    def _chain_hashes_nb(tokens, block_size):
        n_blocks = tokens.shape[0] // block_size
        out = np.empty(n_blocks, dtype=np.uint64)
        parent = np.uint64(ROOT_SEED)
        salt = np.uint64(POS_SALT)
        for b in range(n_blocks):
            content = np.uint64(0)
            base = b * block_size
            for j in range(block_size):
                t = np.uint64(tokens[base + j]) ^ (np.uint64(j) * salt)
                content += _splitmix_nb(t)
            parent = _splitmix_nb(parent ^ content)
            out[b] = parent
        return out

    @nb.njit(cache=True)
    def _nearest_rank_nb(arr, rank):
        return np.partition(arr, rank - 1)[rank - 1]

    def chain_hashes_numba(tokens, block_size):
        tokens = np.ascontiguousarray(tokens, dtype=np.int64)
        return _chain_hashes_nb(tokens, np.int64(block_size))

    def nearest_rank_numba(samples, p):
        arr = np.ascontiguousarray(samples, dtype=np.float64)
        n = arr.shape[0]
        rank = max(1, int(math.ceil(p / 100.0 * n)))
        return float(_nearest_rank_nb(arr, rank))

else:  # pragma: no cover
    chain_hashes_numba = chain_hashes_numpy
    nearest_rank_numba = nearest_rank_numpy


chain_hashes = chain_hashes_numba if USE_NUMBA else chain_hashes_numpy
# numpy's introselect beats numba's np.partition by ~10x on large inputs
# (benchmarks/bench_kernels.py), so the numpy percentile is always used.
nearest_rank = nearest_rank_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"

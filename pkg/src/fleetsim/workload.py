"""Request traces: JSONL loading, synthetic multi-turn generation, bucketing."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

INF = math.inf
DEFAULT_VOCAB = 32000


class TraceError(ValueError):
    """Raised for malformed trace records."""


@dataclass(frozen=True)
class Request:
    id: int
    arrival: float
    model: str
    prompt: tuple
    output_len: int
    adapter: Optional[str] = None
    slo_ttft: Optional[float] = None
    slo_e2e: Optional[float] = None
    # generated token ids when the trace knows them; cached after completion
    output: Optional[tuple] = None
    session: Optional[int] = None

    def __post_init__(self):
        if len(self.prompt) == 0:
            raise TraceError(f"request {self.id}: empty prompt")
        if self.output_len < 1:
            raise TraceError(f"request {self.id}: output_len must be >= 1")
        if self.arrival < 0:
            raise TraceError(f"request {self.id}: negative arrival")

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    @property
    def tenant(self) -> str:
        return self.adapter or self.model

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "ts": self.arrival,
            "model": self.model,
            "adapter": self.adapter,
            "tokens": list(self.prompt),
            "in": None,
            "out": self.output_len,
        }
        if self.output is not None:
            rec["out_tokens"] = list(self.output)
        if self.slo_ttft is not None:
            rec["slo_ttft"] = self.slo_ttft
        if self.slo_e2e is not None:
            rec["slo_e2e"] = self.slo_e2e
        if self.session is not None:
            rec["session"] = self.session
        return rec


@dataclass
class RequestTrace:
    requests: list
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    @property
    def duration(self) -> float:
        if "duration" in self.metadata:
            return float(self.metadata["duration"])
        if not self.requests:
            return 0.0
        return self.requests[-1].arrival - self.requests[0].arrival

    def dumps(self) -> str:
        lines = [json.dumps(r.to_record(), separators=(",", ":")) for r in self.requests]
        return "".join(line + "\n" for line in lines)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def synth_tokens(n: int, seed: int, vocab: int = DEFAULT_VOCAB) -> tuple:
    """Deterministic token ids for a lengths-only record."""
    rng = np.random.default_rng(seed)
    return tuple(rng.integers(0, vocab, size=n).tolist())


def _opt_float(rec, key, lineno):
    v = rec.get(key)
    if v is None:
        return None
    try:
        return float(v)
    except (TypeError, ValueError):
        raise TraceError(f"line {lineno}: field {key!r} is not a number") from None


def load_trace(path, format: str = "jsonl-tokens", vocab: int = DEFAULT_VOCAB,
               seed: int = 0) -> RequestTrace:
    """Read a JSON Lines trace.

    ``jsonl-tokens`` records carry explicit ``tokens``; ``jsonl-lengths``
    records carry ``in`` and are expanded by :func:`synth_tokens` using the
    record's ``seed`` (or ``seed`` + line number when absent).
    """
    if format not in ("jsonl-tokens", "jsonl-lengths"):
        raise ValueError(f"unknown trace format {format!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    requests = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise TraceError(f"line {lineno}: record is not an object")
            try:
                ts = float(rec["ts"])
                out = int(rec["out"])
            except (KeyError, TypeError, ValueError):
                raise TraceError(f"line {lineno}: missing or invalid 'ts'/'out'") from None
            tokens = rec.get("tokens")
            if format == "jsonl-tokens" or tokens is not None:
                if not isinstance(tokens, list):
                    raise TraceError(f"line {lineno}: 'tokens' must be a list of ints")
                prompt = tuple(int(t) for t in tokens)
            else:
                n_in = rec.get("in")
                if not isinstance(n_in, int):
                    raise TraceError(f"line {lineno}: 'in' must be an integer")
                prompt = synth_tokens(n_in, int(rec.get("seed", seed + lineno)), vocab)
            if not prompt:
                raise TraceError(f"line {lineno}: zero-length prompt")
            out_tokens = rec.get("out_tokens")
            try:
                req = Request(
                    id=int(rec.get("id", len(requests))),
                    arrival=ts,
                    model=str(rec.get("model", "base")),
                    adapter=rec.get("adapter"),
                    prompt=prompt,
                    output_len=out,
                    slo_ttft=_opt_float(rec, "slo_ttft", lineno),
                    slo_e2e=_opt_float(rec, "slo_e2e", lineno),
                    output=tuple(out_tokens) if out_tokens is not None else None,
                    session=rec.get("session"),
                )
            except TraceError as exc:
                raise TraceError(f"line {lineno}: {exc}") from None
            requests.append(req)

    meta = {"source": str(path), "format": format, "vocab": vocab}
    arrivals = [r.arrival for r in requests]
    if any(b < a for a, b in zip(arrivals, arrivals[1:])):
        meta["reordered"] = True
        logger.warning("trace %s had unsorted arrivals; reordered", path)
        requests.sort(key=lambda r: r.arrival)  # stable
    ids = [r.id for r in requests]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        requests = [_with_id(r, i) for i, r in enumerate(requests)]
        meta["renumbered"] = True
    return RequestTrace(requests, meta)


def _with_id(req: Request, new_id: int) -> Request:
    d = dict(req.__dict__)
    d["id"] = new_id
    return Request(**d)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

@dataclass
class LengthDist:
    """Token-length distribution: constant, uniform, lognormal or a preset."""

    kind: str = "constant"
    value: float = 128
    low: float = 1
    high: float = 256
    mean: float = 128.0
    sigma: float = 0.5
    min: int = 1
    max: int = 16384

    PRESETS = {
        # lognormal fits roughly matching public chat-trace length statistics
        "sharegpt-in": dict(kind="lognormal", mean=160.0, sigma=1.0, min=4, max=4096),
        "sharegpt-out": dict(kind="lognormal", mean=220.0, sigma=0.9, min=4, max=2048),
        # synthetic stand-in for a text-to-SQL mix: short questions, short answers
        "text2sql-in": dict(kind="lognormal", mean=90.0, sigma=0.4, min=16, max=512),
        "text2sql-out": dict(kind="lognormal", mean=40.0, sigma=0.4, min=4, max=256),
    }

    @classmethod
    def from_config(cls, cfg) -> "LengthDist":
        if isinstance(cfg, LengthDist):
            return cfg
        if isinstance(cfg, (int, float)):
            return cls(kind="constant", value=cfg)
        if isinstance(cfg, str):
            if cfg not in cls.PRESETS:
                raise ValueError(f"unknown length preset {cfg!r}")
            return cls(**cls.PRESETS[cfg])
        cfg = dict(cfg)
        preset = cfg.pop("preset", None)
        base = dict(cls.PRESETS[preset]) if preset else {}
        base.update(cfg)
        dist = cls(**base)
        dist.validate()
        return dist

    def validate(self):
        if self.kind not in ("constant", "uniform", "lognormal"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.min < 1 or self.max < self.min:
            raise ValueError("distribution bounds must satisfy 1 <= min <= max")
        if self.kind == "uniform" and self.high < self.low:
            raise ValueError("uniform distribution needs low <= high")
        if self.kind == "lognormal" and (self.mean <= 0 or self.sigma < 0):
            raise ValueError("lognormal distribution needs mean > 0, sigma >= 0")

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "constant":
            v = self.value
        elif self.kind == "uniform":
            v = rng.uniform(self.low, self.high)
        else:
            # parameterised by the arithmetic mean
            mu = math.log(self.mean) - 0.5 * self.sigma ** 2
            v = rng.lognormal(mu, self.sigma)
        return int(min(self.max, max(self.min, round(v))))


@dataclass
class SynthSpec:
    rate: float = 1.0
    duration: float = 60.0
    session_count: int = 1
    turns_per_session: int = 1
    shared_prefix_len: int = 0
    in_dist: Any = 128
    out_dist: Any = 64
    seed: int = 0
    model: str = "base"
    adapters: Sequence[str] = ()
    vocab: int = DEFAULT_VOCAB
    # per-session document prefix drawn from a fixed pool (schema-style reuse)
    prefix_groups: int = 0
    group_prefix_dist: Any = 1024
    group_skew: float = 0.0
    # optional piecewise-constant rate: [[start_time, rate], ...]
    phases: Optional[Sequence[Sequence[float]]] = None
    slo_ttft: Optional[float] = None
    slo_e2e: Optional[float] = None

    @classmethod
    def from_config(cls, cfg: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown synth fields: {sorted(unknown)}")
        spec = cls(**cfg)
        spec.validate()
        return spec

    def validate(self):
        if self.rate <= 0 and not self.phases:
            raise ValueError("synth rate must be > 0")
        if self.duration <= 0:
            raise ValueError("synth duration must be > 0")
        if self.session_count < 1 or self.turns_per_session < 1:
            raise ValueError("session_count and turns_per_session must be >= 1")
        if self.shared_prefix_len < 0 or self.prefix_groups < 0:
            raise ValueError("prefix lengths must be >= 0")
        if self.phases:
            starts = [p[0] for p in self.phases]
            if starts != sorted(starts) or any(p[1] < 0 for p in self.phases):
                raise ValueError("phases must be sorted by start with rates >= 0")
        LengthDist.from_config(self.in_dist)
        LengthDist.from_config(self.out_dist)
        LengthDist.from_config(self.group_prefix_dist)


def poisson_arrivals(rng: np.random.Generator, rate: float, duration: float,
                     phases=None) -> np.ndarray:
    """Arrival times of a (piecewise-homogeneous) Poisson process on [0, duration)."""
    if not phases:
        phases = [(0.0, rate)]
    times = []
    bounds = [float(p[0]) for p in phases[1:]] + [duration]
    for (start, r), end in zip(phases, bounds):
        start, end = float(start), min(float(end), duration)
        if r <= 0 or end <= start:
            continue
        t = start
        while True:
            t += rng.exponential(1.0 / r)
            if t >= end:
                break
            times.append(t)
    return np.asarray(times)


def synth_trace(spec: SynthSpec) -> RequestTrace:
    """Generate a multi-turn trace.

    Arrival ``i`` goes to session slot ``i % session_count``; each slot runs
    ``turns_per_session`` turns and then starts a fresh session.  Turn ``k+1``
    of a session is turn ``k``'s prompt, its output, and a new user message.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    in_dist = LengthDist.from_config(spec.in_dist)
    out_dist = LengthDist.from_config(spec.out_dist)
    group_dist = LengthDist.from_config(spec.group_prefix_dist)

    def tokens(n):
        return tuple(rng.integers(0, spec.vocab, size=n).tolist())

    system = tokens(spec.shared_prefix_len)
    groups = [tokens(group_dist.sample(rng)) for _ in range(spec.prefix_groups)]
    if groups:
        w = np.array([1.0 / (k + 1) ** spec.group_skew for k in range(len(groups))])
        group_p = w / w.sum()

    arrivals = poisson_arrivals(rng, spec.rate, spec.duration, spec.phases)
    n_slots = spec.session_count
    # per slot: [session_id, turn, context tokens, adapter]
    slots = [None] * n_slots
    next_session = 0
    requests = []
    for i, t in enumerate(arrivals.tolist()):
        s = i % n_slots
        if slots[s] is None or slots[s][1] >= spec.turns_per_session:
            ctx = system
            if groups:
                ctx = ctx + groups[int(rng.choice(len(groups), p=group_p))]
            adapter = None
            if spec.adapters:
                adapter = spec.adapters[int(rng.integers(len(spec.adapters)))]
            slots[s] = [next_session, 0, ctx, adapter]
            next_session += 1
        sess_id, turn, ctx, adapter = slots[s]
        prompt = ctx + tokens(in_dist.sample(rng))
        out_len = out_dist.sample(rng)
        output = tokens(out_len)
        requests.append(Request(
            id=i, arrival=t, model=spec.model, adapter=adapter, prompt=prompt,
            output_len=out_len, output=output, session=sess_id,
            slo_ttft=spec.slo_ttft, slo_e2e=spec.slo_e2e,
        ))
        slots[s] = [sess_id, turn + 1, prompt + output, adapter]

    meta = {"source": "synth", "vocab": spec.vocab, "seed": spec.seed,
            "duration": spec.duration}
    return RequestTrace(requests, meta)


# ---------------------------------------------------------------------------
# bucketing
# ---------------------------------------------------------------------------

@dataclass
class WorkloadHistogram:
    edges_in: tuple
    edges_out: tuple
    rates: np.ndarray          # shape (len(edges_in), len(edges_out)), req/s
    counts: np.ndarray
    duration: float

    @property
    def total_rate(self) -> float:
        return float(self.rates.sum())

    @property
    def buckets(self) -> dict:
        return {(i, j): float(self.rates[i, j])
                for i in range(self.rates.shape[0])
                for j in range(self.rates.shape[1])}

    def demand(self) -> dict:
        """Non-zero buckets only."""
        return {k: v for k, v in self.buckets.items() if v > 0}


def bucket_index(value: float, edges: Sequence[float]) -> int:
    """Bucket ``i`` covers ``[edges[i-1], edges[i])`` with ``edges[-1]`` exclusive."""
    for i, e in enumerate(edges):
        if value < e:
            return i
    raise ValueError(f"length {value} not covered by edges {list(edges)}")


def _check_edges(edges):
    edges = tuple(float(e) for e in edges)
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be non-empty and ascending: {edges}")
    return edges


def bucketize(trace, edges_in, edges_out, duration: Optional[float] = None
              ) -> WorkloadHistogram:
    """Per-(input, output) bucket arrival rates over ``duration`` seconds."""
    edges_in, edges_out = _check_edges(edges_in), _check_edges(edges_out)
    requests = trace.requests if isinstance(trace, RequestTrace) else list(trace)
    if duration is None:
        duration = trace.duration if isinstance(trace, RequestTrace) else 0.0
    counts = np.zeros((len(edges_in), len(edges_out)), dtype=np.int64)
    for r in requests:
        counts[bucket_index(r.prompt_len, edges_in), bucket_index(r.output_len, edges_out)] += 1
    if duration > 0:
        rates = counts / duration
    else:
        rates = np.zeros(counts.shape)
    return WorkloadHistogram(edges_in, edges_out, rates, counts, float(duration))


def bucket_representative(edges: Sequence[float], i: int) -> int:
    """Token length used to profile bucket ``i``: the midpoint, or 1.5x the
    lower edge for the open-ended last bucket."""
    lo = 0.0 if i == 0 else float(edges[i - 1])
    hi = float(edges[i])
    if math.isinf(hi):
        return max(1, int(round(1.5 * lo)) if lo > 0 else 1)
    return max(1, int(round((lo + hi) / 2)))

"""Write mixed-trace.jsonl: short chat requests plus long document requests.

    python3 make_mixed_trace.py [--seed N] [--out PATH]
"""
import argparse
import json

import numpy as np

CLASSES = [
    # rate req/s, input range, output range
    (20.0, (40, 160), (20, 80)),
    (3.0, (800, 1400), (400, 700)),
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--duration", type=float, default=300.0)
    ap.add_argument("--out", default="mixed-trace.jsonl")
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    rows = []
    for rate, (in_lo, in_hi), (out_lo, out_hi) in CLASSES:
        t = rng.exponential(1.0 / rate)
        while t < args.duration:
            rows.append((t, int(rng.integers(in_lo, in_hi + 1)), int(rng.integers(out_lo, out_hi + 1))))
            t += rng.exponential(1.0 / rate)
    rows.sort()
    with open(args.out, "w") as fh:
        for i, (t, n_in, n_out) in enumerate(rows):
            fh.write(json.dumps({"id": i, "ts": round(t, 6), "in": n_in, "out": n_out,
                                 "seed": args.seed * 1_000_003 + i}) + "\n")


if __name__ == "__main__":
    main()

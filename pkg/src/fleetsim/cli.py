"""Command-line entry point: ``fleetsim {run,profile,compare,validate}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .config import ConfigError, load_profiles, load_scenario
from .workload import TraceError

logger = logging.getLogger("fleetsim")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3

# (label, path into report.json, higher is better)
COMPARE_METRICS = [
    ("Throughput total (tok/s)", ("throughput", "total"), True),
    ("Throughput decoding (tok/s)", ("throughput", "decoding"), True),
    ("TTFT avg (ms)", ("ttft_ms", "avg"), False),
    ("TTFT p99 (ms)", ("ttft_ms", "p99"), False),
    ("ITL avg (ms)", ("itl_ms", "avg"), False),
    ("ITL p99 (ms)", ("itl_ms", "p99"), False),
    ("Completion time (s)", ("completion_time_s",), False),
]


def _edges(text: str):
    out = []
    for part in text.split(","):
        part = part.strip()
        out.append(math.inf if part.lower() in ("inf", "+inf") else float(part))
    return tuple(out)


def improvement(a: float, b: float, higher_is_better: bool) -> float:
    """Percentage improvement of ``b`` over baseline ``a``."""
    if a == b:
        return 0.0
    if a == 0:
        return math.inf if (b > a) == higher_is_better else -math.inf
    return (b - a) / a * 100.0 if higher_is_better else (a - b) / a * 100.0


def log_ratio(a: float, b: float) -> float:
    if a == b:
        return 0.0
    if a <= 0 or b <= 0:
        return math.nan
    return math.log(b / a)


def _lookup(report: dict, path, which: str):
    node = report
    for key in path:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"report {which} lacks metric {'.'.join(path)}")
        node = node[key]
    return float(node)


def compare_reports(a: dict, b: dict) -> list:
    rows = []
    for label, path, higher in COMPARE_METRICS:
        va, vb = _lookup(a, path, "A"), _lookup(b, path, "B")
        rows.append({"metric": label, "a": va, "b": vb,
                     "improvement_pct": improvement(va, vb, higher),
                     "log_ratio": log_ratio(va, vb)})
    return rows


def format_compare(rows, label_a="A", label_b="B") -> str:
    w = max(len(r["metric"]) for r in rows)
    lines = [f"{'Metric'.ljust(w)}  {label_a:>12}  {label_b:>12}  {'Improvement':>12}  {'ln(B/A)':>9}"]
    for r in rows:
        lines.append(f"{r['metric'].ljust(w)}  {r['a']:>12,.2f}  {r['b']:>12,.2f}  "
                     f"{r['improvement_pct']:>11.2f}%  {r['log_ratio']:>9.4f}")
    return "\n".join(lines) + "\n"


def _overrides(args) -> dict:
    return {"policy": getattr(args, "policy", None), "scaler": getattr(args, "scaler", None),
            "seed": getattr(args, "seed", None), "out": getattr(args, "out", None)}


def write_outputs(report, cfg, out_dir: Path) -> list:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        (out_dir / name).write_text(text)
        written.append(out_dir / name)

    put("report.json", report.to_json())
    put("report.txt", report.to_text(cfg.name))
    put("replicas.csv", report.replicas_csv())
    if cfg.output.records_csv:
        put("records.csv", report.records_csv())
    if report.decisions is not None:
        put("decisions.jsonl", report.decisions.dumps())
    return written


def cmd_run(args) -> int:
    from .simengine import InvariantError, run
    try:
        cfg = load_scenario(args.config, _overrides(args))
        report = run(cfg)
    except (ConfigError, TraceError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantError, AssertionError) as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    sys.stdout.write(report.to_text(cfg.name))
    if cfg.output.dir is not None:
        out = cfg.resolve(cfg.output.dir) if args.out is None else Path(args.out)
        for p in write_outputs(report, cfg, out):
            logger.info("wrote %s", p)
    return EXIT_OK


def cmd_profile(args) -> int:
    from .cluster import DEFAULT_PROFILES
    from .optimizer import build_capacity_table
    try:
        profiles = load_profiles(args.profiles) if args.profiles else dict(DEFAULT_PROFILES)
        if args.gpu:
            missing = [g for g in args.gpu if g not in profiles]
            if missing:
                raise ConfigError(f"unknown GPU types {missing}")
            profiles = {g: profiles[g] for g in args.gpu}
        edges_in, edges_out = _edges(args.edges_in), _edges(args.edges_out)
        if args.slo <= 0:
            raise ConfigError("--slo must be > 0")
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    table = build_capacity_table(profiles, edges_in, edges_out, args.slo, args.metric,
                                 n=args.requests, seed=args.seed, chunked=args.chunked)
    for key, status in sorted(table.status.items()):
        if status == "unattainable":
            print(f"warning: SLO unattainable for {key}", file=sys.stderr)
    if args.out:
        table.save(args.out)
    else:
        sys.stdout.write(table.dumps())
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        a = json.loads(Path(args.a).read_text())
        b = json.loads(Path(args.b).read_text())
        rows = compare_reports(a, b)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        sys.stdout.write(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    else:
        sys.stdout.write(format_compare(rows, args.label_a, args.label_b))
    return EXIT_OK


def cmd_validate(args) -> int:
    status = EXIT_OK
    for path in args.configs:
        try:
            cfg = load_scenario(path)
        except (ConfigError, TraceError) as exc:
            print(f"{path}: INVALID: {exc}")
            status = EXIT_CONFIG
        else:
            print(f"{path}: ok ({cfg.name})")
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fleetsim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario")
    r.add_argument("config")
    r.add_argument("--policy", help="override gateway.policy")
    r.add_argument("--scaler", help="override scaler algorithm (hpa, kpa, apa, none)")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--out", help="run directory for report files")
    r.set_defaults(func=cmd_run)

    pr = sub.add_parser("profile", help="build a capacity table")
    pr.add_argument("--profiles", help="GPU profile YAML (default: built-in A10/L20)")
    pr.add_argument("--gpu", action="append", help="restrict to this GPU type (repeatable)")
    pr.add_argument("--edges-in", default="200,1000,inf")
    pr.add_argument("--edges-out", default="100,500,inf")
    pr.add_argument("--slo", type=float, required=True, help="latency target in seconds")
    pr.add_argument("--metric", choices=("ttft", "e2e"), default="ttft")
    pr.add_argument("--requests", type=int, default=200)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--chunked", action="store_true", help="profile with chunked prefill")
    pr.add_argument("--out", help="output CSV (default: stdout)")
    pr.set_defaults(func=cmd_profile)

    c = sub.add_parser("compare", help="improvement table between two report.json files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--label-a", default="A")
    c.add_argument("--label-b", default="B")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="check scenario files")
    v.add_argument("configs", nargs="+")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

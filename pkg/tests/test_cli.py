import json
import math
import subprocess
import sys
import time
from pathlib import Path

import pytest
import yaml

from fleetsim import cli
from fleetsim.config import ConfigError, load_scenario
from conftest import SCENARIOS

SMALL = {"name": "small", "seed": 3,
         "deployments": [{"name": "d", "gpu": "A10", "replicas": 2}],
         "workload": {"synth": {"rate": 2.0, "duration": 20.0}}}


def write(tmp_path, data, name="s.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def test_run_writes_outputs(tmp_path, capsys):
    cfgp = write(tmp_path, SMALL)
    out = tmp_path / "run"
    assert cli.main(["run", str(cfgp), "--out", str(out)]) == cli.EXIT_OK
    for name in ("report.json", "report.txt", "replicas.csv", "records.csv"):
        assert (out / name).exists()
    assert "Thr.Total" in capsys.readouterr().out


def test_run_is_idempotent_and_seeded(tmp_path):
    cfgp = write(tmp_path, SMALL)
    texts = []
    for i, seed in enumerate(["3", "3", "4"]):
        out = tmp_path / f"r{i}"
        assert cli.main(["run", str(cfgp), "--seed", seed, "--out", str(out)]) == 0
        texts.append((out / "report.json").read_text())
    assert texts[0] == texts[1] != texts[2]
    # rerunning into the same directory overwrites in place
    assert cli.main(["run", str(cfgp), "--seed", "3", "--out", str(tmp_path / "r0")]) == 0
    assert (tmp_path / "r0" / "report.json").read_text() == texts[0]


def test_missing_trace_exit_code(tmp_path, capsys):
    data = dict(SMALL, workload={"trace": "nope.jsonl"})
    cfgp = write(tmp_path, data)
    assert cli.main(["run", str(cfgp)]) == cli.EXIT_CONFIG
    assert "nope.jsonl" in capsys.readouterr().err


def test_invariant_exit_code(tmp_path, monkeypatch):
    from fleetsim import simengine

    def boom(cfg, *a, **k):
        raise simengine.InvariantError("kv over capacity")
    monkeypatch.setattr(simengine, "run", boom)
    assert cli.main(["run", str(write(tmp_path, SMALL))]) == cli.EXIT_INVARIANT


def test_policy_and_scaler_override(tmp_path):
    cfg = load_scenario(write(tmp_path, SMALL), {"policy": "least-kv-cache", "scaler": "kpa"})
    assert cfg.gateway.policy == "least-kv-cache" and cfg.scaler.algorithm == "kpa"
    assert load_scenario(write(tmp_path, SMALL), {"scaler": "none"}).scaler is None


def test_improvement_examples():
    assert cli.improvement(1802.30, 4133.45, True) == pytest.approx(129.34, abs=0.005)
    assert cli.improvement(3067.07, 825.77, False) == pytest.approx(73.08, abs=0.005)
    assert cli.improvement(607.87, 265.06, False) == pytest.approx(56.40, abs=0.005)
    assert cli.improvement(5.0, 5.0, True) == 0.0


def test_log_ratio_antisymmetric():
    for a, b in [(1.0, 2.0), (3067.07, 825.77), (0.5, 0.25)]:
        assert cli.log_ratio(a, b) == pytest.approx(-cli.log_ratio(b, a))
    assert math.isnan(cli.log_ratio(0.0, 1.0))


def test_compare_self_is_zero(tmp_path, capsys):
    cfgp = write(tmp_path, SMALL)
    cli.main(["run", str(cfgp), "--out", str(tmp_path / "a")])
    rep = str(tmp_path / "a" / "report.json")
    capsys.readouterr()
    assert cli.main(["compare", rep, rep, "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows and all(r["improvement_pct"] == 0.0 and r["log_ratio"] == 0.0 for r in rows)


def test_compare_missing_metric(tmp_path, capsys):
    a = tmp_path / "a.json"
    a.write_text(json.dumps({"throughput": {"total": 1}}))
    assert cli.main(["compare", str(a), str(a)]) == cli.EXIT_CONFIG
    assert "lacks metric" in capsys.readouterr().err


def test_profile_single_cell(tmp_path):
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["profile", "--gpu", "A10", "--edges-in", "inf", "--edges-out", "inf",
            "--slo", "2.0", "--requests", "60"]
    assert cli.main(args + ["--out", str(out1)]) == 0
    assert cli.main(args + ["--out", str(out2)]) == 0
    lines = out1.read_text().splitlines()
    assert lines[0] == "gpu,in_bucket,out_bucket,in_len,out_len,rps,status" and len(lines) == 2
    assert out1.read_text() == out2.read_text()


def test_profile_rejects_unknown_gpu(capsys):
    assert cli.main(["profile", "--gpu", "H100", "--slo", "1"]) == cli.EXIT_CONFIG


def test_validate_all_shipped():
    paths = sorted(str(p) for p in SCENARIOS.glob("*.yaml"))
    assert len(paths) >= 9
    assert cli.main(["validate", *paths]) == 0


def test_validate_reports_bad(tmp_path, capsys):
    bad = write(tmp_path, dict(SMALL, engine={"prefix_caching": "yes"}))
    assert cli.main(["validate", str(bad)]) == cli.EXIT_CONFIG
    assert "INVALID" in capsys.readouterr().out
    with pytest.raises(ConfigError):
        load_scenario(write(tmp_path, dict(SMALL, gateway={"policy": "fastest"})))


def test_base_inheritance(tmp_path):
    write(tmp_path, SMALL, "parent.yaml")
    child = write(tmp_path, {"base": "parent.yaml", "engine": {"prefix_caching": True},
                             "deployments": [{"name": "d", "gpu": "L20", "replicas": 1}]}, "child.yaml")
    cfg = load_scenario(child)
    assert cfg.engine.prefix_caching and cfg.seed == 3
    assert cfg.deployments[0].gpu == "L20"
    loop = write(tmp_path, {"base": "loop.yaml"}, "loop.yaml")
    with pytest.raises(ConfigError):
        load_scenario(loop)


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_scenarios_run_fast(path, tmp_path):
    t0 = time.perf_counter()
    assert cli.main(["run", str(path), "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 60


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fleetsim", "validate", str(write(tmp_path, SMALL))],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "ok" in proc.stdout

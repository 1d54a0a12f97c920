import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fleetsim.autoscaler import (MetricWindow, ScalerConfig, ScalerState, aggregate, apa_desired,
                                 external_plan_desired, hpa_desired, kpa_desired, reconcile,
                                 sign_changes)

from oracles import naive_window_mean


def test_hpa_examples():
    assert hpa_desired(4, 10, 5, 0.1) == 8
    assert hpa_desired(4, 5.2, 5, 0.1) == 4          # inside tolerance
    assert hpa_desired(4, 1, 5, 0.1, min_replicas=2) == 2
    assert hpa_desired(4, 100, 5, 0.1, max_replicas=10) == 10


def test_apa_band():
    assert apa_desired(4, 1.3, 1.0, 0.1, 0.2) == 6
    assert apa_desired(4, 0.95, 1.0, 0.1, 0.2) == 4
    assert apa_desired(4, 0.5, 1.0, 0.1, 0.2) == 2


def test_config_defaults():
    c = ScalerConfig()
    assert (c.sync_period, c.hpa_tolerance, c.kpa_stable_span, c.kpa_panic_span) == (15, 0.1, 60, 6)
    assert c.cold_start == 150 and c.metric == "concurrency"
    assert ScalerConfig(algorithm="apa").metric == "kv_utilization"
    with pytest.raises(ValueError):
        ScalerConfig(kpa_panic_span=100)
    with pytest.raises(ValueError):
        ScalerConfig(min_replicas=5, max_replicas=2)


def test_kpa_panic_enters_and_holds():
    st_ = ScalerState(current_replicas=2)
    want, panic = kpa_desired(8, 40, st_, 4, 2.0, ready=2, now=0, stable_span=60)
    assert panic and want == 10
    st_.current_replicas = want
    # load vanishes: still panicking and never below the panic high-water mark
    want, panic = kpa_desired(0, 0, st_, 4, 2.0, ready=10, now=30, stable_span=60)
    assert panic and want == 10
    want, panic = kpa_desired(0, 0, st_, 4, 2.0, ready=10, now=60, stable_span=60)
    assert not panic and want == 1


def test_kpa_stable_mode():
    st_ = ScalerState(current_replicas=3)
    assert kpa_desired(12, 13, st_, 4, 2.0, ready=3, now=0, stable_span=60) == (3, False)


def test_window_expiry():
    w = MetricWindow(10)
    for t in range(20):
        w.add(float(t), float(t))
    assert aggregate(w, 19.0) == pytest.approx(np.mean(range(9, 20)))
    with pytest.raises(ValueError):
        w.add(5.0, 1.0)


@given(st.lists(st.tuples(st.floats(0, 5), st.floats(-1e9, 1e9)), max_size=80),
       st.floats(0.5, 30))
def test_window_matches_exact_recompute(steps, span):
    w = MetricWindow(span)
    t, seen = 0.0, []
    for dt, v in steps:
        t += dt
        w.add(t, v)
        seen.append((t, v))
        assert aggregate(w, t) == naive_window_mean(seen, t, span)


def test_reconcile_prefers_starting_then_idle():
    st_ = ScalerState(current_replicas=4)
    inst = [(0, "ready", 3), (1, "ready", 0), (2, "starting", 0), (3, "ready", 1)]
    acts = reconcile(st_, 2, 100.0, 150.0, inst)
    assert [(a.kind, a.instance) for a in acts] == [("remove", 2), ("remove", 1)]
    acts = reconcile(st_, 1, 100.0, 150.0, [(0, "ready", 3), (3, "ready", 1)])
    assert [(a.kind, a.instance) for a in acts] == [("drain", 3)]
    acts = reconcile(st_, 3, 100.0, 150.0, [(0, "ready", 3)])
    assert [(a.kind, a.ready_at) for a in acts] == [("add", 250.0), ("add", 250.0)]


def test_external_plan():
    d, clamped = external_plan_desired({"A10": 5, "L20": 1}, ["A10", "L20"], 0, {"A10": 3, "L20": 4})
    assert d == {"A10": 3, "L20": 1} and clamped == ["A10"]
    with pytest.raises(KeyError):
        external_plan_desired({"H100": 1}, ["A10"])


def test_sign_changes():
    assert sign_changes([1, 2, 3, 3, 2, 2, 4, 1]) == 3
    assert sign_changes([5, 5, 5]) == 0

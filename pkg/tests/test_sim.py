import json
import math
import os

import pytest

from elasticplan.coord import ParamPartition
from elasticplan.model import ClusterConfig, JobMode, NodeSpec, Role
from elasticplan.perfmodel import job_throughput, step_time
from elasticplan.sim import (REPORT_KEYS, FaultEntry, FaultKind, PodPhase, PolicyKind, Scenario,
                             SimReport, SimSettings, Simulation, SimulationError, bundled_names,
                             inject_fault, load_scenario, measure_throughput, pending_time,
                             run_scenario, sample_stats)
from elasticplan.sim import _FixedPlan
from elasticplan.sim.report import SERIES_COLUMNS

from conftest import make_job, make_plan
from search_util import best_plan

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "report_schema.json")


def _scenario(plan, policy="static", faults=(), cluster=None, **job_kw):
    job = make_job(**job_kw)
    return Scenario(name="t", job=job, static_plan=plan, policy=policy, faults=list(faults),
                    cluster=cluster or ClusterConfig(), sim=SimSettings(shard_size=2048))


# -- pending time ------------------------------------------------------------------------

def test_pending_time_affine(cfg):
    assert pending_time(NodeSpec(cpu_cores=16, memory_mb=1), cfg) == 13.0


def test_pending_time_zero_config():
    cfg = ClusterConfig(pending_base_s=0.0, pending_per_cpu_s=0.0)
    assert pending_time(NodeSpec(cpu_cores=32, memory_mb=1), cfg) == 0.0


def test_pending_time_monotone(cfg):
    assert pending_time(NodeSpec(cpu_cores=32, memory_mb=1), cfg) > \
        pending_time(NodeSpec(cpu_cores=4, memory_mb=1), cfg)


# -- timeline ------------------------------------------------------------------------------

def test_single_worker_closed_form_jct(cfg):
    sc = _scenario(make_plan(1, 4, 1), dataset_size=512 * 40)
    report = run_scenario(sc)
    init = cfg.worker_init_s + sc.job.model_memory_mb / cfg.checkpoint_bandwidth_mb_s
    start = max(pending_time(sc.static_plan.worker, cfg), pending_time(sc.static_plan.ps, cfg)) + init
    expected = start + 40 * step_time(sc.job, 4, 16, cfg).total
    assert report.completed
    assert report.jct == pytest.approx(expected, rel=1e-6)


def test_checkpoints_do_not_change_timeline(cfg):
    base = _scenario(make_plan(1, 4, 1), dataset_size=512 * 40)
    rare = base.model_copy(update={"sim": base.sim.model_copy(update={"checkpoint_interval_steps": 10**6})})
    a, b = run_scenario(base), run_scenario(rare)
    assert a.checkpoints == 0 or a.checkpoints > b.checkpoints
    assert a.jct == pytest.approx(b.jct, rel=1e-9)


def test_same_seed_identical_report():
    sc = load_scenario("wd_faults")
    assert run_scenario(sc, 3).to_json() == run_scenario(sc, 3).to_json()


def test_different_seed_changes_fault_targets():
    sc = load_scenario("wd_faults")
    faults = {json.dumps([e for e in run_scenario(sc, s).trace if e["kind"] == "FAULT"])
              for s in range(6)}
    assert len(faults) > 1


def test_deadlock_raises_with_state():
    sim = Simulation(_scenario(make_plan(1, 4, 1)), policy=_FixedPlan(make_plan(1, 4, 1)))
    sim.start()
    sim._heap.clear()
    with pytest.raises(SimulationError, match="deadlock") as err:
        sim.run_loop()
    assert "pods" in err.value.state


def test_timeout_fails_job():
    sc = _scenario(make_plan(1, 4, 1))
    sc = sc.model_copy(update={"sim": sc.sim.model_copy(update={"max_time_s": 50.0})})
    report = run_scenario(sc)
    assert report.status == "FAILED" and "timeout" in report.failure_reason


# -- usage sampling ----------------------------------------------------------------------------

def _steady(plan, until=200.0, shares=None, **job_kw):
    job = make_job(dataset_size=512 * 100_000, **job_kw)
    sc = Scenario(name="s", job=job, static_plan=plan, sim=SimSettings(shard_size=2048))
    sim = Simulation(sc, policy=_FixedPlan(plan), steady=True)
    if shares is not None:
        sim.partition = ParamPartition(len(shares), tuple(shares), job.model_memory_mb)
    return sim.start().run_until(until)


def test_sample_worker_usage_is_demand():
    stats = sample_stats(_steady(make_plan(1, 32, 1)), 200.0)
    assert stats.worker_used_cpu == [pytest.approx(2.5)]
    assert stats.worker_alloc_cpu == [32]


def test_sample_usage_scaled_by_speed():
    sim = _steady(make_plan(1, 32, 1), until=10.0)
    sim.pods[next(iter(sim.workers))].machine_speed = 0.25
    sim._recompute()
    sim._tick_mark = sim.capture_mark()
    sim.run_until(50.0)
    assert sample_stats(sim, 40.0).worker_used_cpu == [pytest.approx(0.625)]


def test_sample_hot_ps_share():
    sim = _steady(make_plan(1, 32, 2), shares=[0.5, 0.5], required_ps_cpu_per_worker=8.0)
    assert sample_stats(sim, 200.0).ps_used_cpu == [pytest.approx(4.0), pytest.approx(4.0)]
    sim = _steady(make_plan(1, 32, 3), shares=[0.5, 0.25, 0.25], required_ps_cpu_per_worker=8.0)
    assert sample_stats(sim, 200.0).ps_used_cpu[0] == pytest.approx(4.0)


def test_sample_throughput_in_steps():
    sim = _steady(make_plan(4, 4, 2))
    stats = sample_stats(sim, 200.0)
    expected = job_throughput(sim.job, 4, 4, 32, ClusterConfig()) / sim.job.batch_size_per_worker
    assert stats.throughput == pytest.approx(expected, rel=0.02)


def test_idle_job_reports_baseline_only():
    cluster = ClusterConfig(baseline_cpu_overhead=0.3)
    sim = Simulation(_scenario(make_plan(1, 4, 1), cluster=cluster))
    sim.start().run_until(112.0)  # worker ready, PS still initialising
    stats = sample_stats(sim, 15.0)
    assert stats.throughput == 0.0
    assert all(u == pytest.approx(0.3) for u in stats.worker_used_cpu + stats.ps_used_cpu)


def test_sample_window_shorter_than_retained_data():
    sim = Simulation(_scenario(make_plan(1, 4, 1))).start().run_until(100.0)  # last tick at 90
    with pytest.raises(ValueError):
        sample_stats(sim, 5.0)
    assert sample_stats(sim, 10.0).window_start_time == 90.0


# -- steady state ------------------------------------------------------------------------------

@pytest.mark.parametrize("n_w,cpu,n_ps", [(1, 4, 1), (8, 3, 2), (24, 3, 8), (32, 2, 2)])
def test_measure_matches_model(n_w, cpu, n_ps):
    job = make_job()
    plan = make_plan(n_w, cpu, n_ps)
    assert measure_throughput(job, plan) == pytest.approx(
        job_throughput(job, n_w, cpu, 16 * n_ps, ClusterConfig()), rel=1e-6)


def test_worker_join_does_not_disturb_others():
    plan = make_plan(2, 4, 4)
    sim = _steady(plan, until=50.0)
    before = {w: r.rate for w, r in sim.workers.items()}
    sim.apply_plan(plan.model_copy(update={"worker_count": 3}), "GROW")
    sim.run_until(100.0)
    assert len(sim.workers) == 3
    assert {w: sim.workers[w].rate for w in before} == pytest.approx(before)
    assert sim.halts == []


# -- faults -------------------------------------------------------------------------------

def _run_with(faults, policy="dlrover", **kw):
    sc = _scenario(make_plan(4, 4, 2), policy=policy, faults=faults, dataset_size=512 * 4000, **kw)
    return run_scenario(sc)


def test_preempt_worker_dlrover_completes():
    r = _run_with([FaultEntry(time=200.0, target="worker:random", fault=FaultKind.PREEMPT)])
    assert r.completed and r.conserved
    assert any(e["kind"] == "POD_PREEMPTED" for e in r.trace)


def test_preempt_worker_static_fails():
    r = _run_with([FaultEntry(time=150.0, target="worker:0", fault=FaultKind.PREEMPT)], policy="static")
    assert r.status == "FAILED" and "PREEMPTED" in r.failure_reason


def test_oom_within_allocation_has_no_effect():
    faults = [FaultEntry(time=150.0, target="worker:0", fault=FaultKind.OOM, demand_mb=1024)]
    plain = _run_with([], policy="static")
    r = _run_with(faults, policy="static")
    assert r.completed and r.jct == pytest.approx(plain.jct)
    assert not any(e["kind"] == "POD_FAILED_OOM" for e in r.trace)


def test_oom_above_allocation_fails_pod():
    faults = [FaultEntry(time=150.0, target="worker:0", fault=FaultKind.OOM, demand_mb=6000)]
    r = _run_with(faults, policy="static")
    assert r.status == "FAILED" and "FAILED_OOM" in r.failure_reason


def test_inject_fault_slow():
    sim = _steady(make_plan(2, 4, 1), until=10.0)
    target = sorted(sim.workers)[0]
    inject_fault(sim, FaultEntry(time=10.0, target=target, fault=FaultKind.SLOW, factor=0.5))
    assert sim.pods[target].machine_speed == 0.5
    rates = {w: r.rate for w, r in sim.workers.items()}
    assert rates[target] == pytest.approx(0.5 * max(rates.values()))


def test_ps_preemption_rolls_back_to_checkpoint():
    r = run_scenario(load_scenario("wd_faults"))
    (rb,) = [e for e in r.trace if e["kind"] == "ROLLBACK"]
    assert 0 <= rb["lost_steps"] < 100 and r.lost_steps == rb["lost_steps"]
    assert not r.restarted_from_zero and r.conserved


def test_ps_failure_before_checkpoint_restarts_from_zero():
    faults = [FaultEntry(time=114.0, target="ps:0", fault=FaultKind.PREEMPT)]
    r = _run_with(faults)
    assert r.completed and r.conserved and r.restarted_from_zero


def test_slow_ps_diagnosed_as_straggler():
    r = run_scenario(load_scenario("wd_ps_straggler"))
    assert "PS_STRAGGLER" in [d["reason"] for d in r.decisions]
    assert any(e["kind"] == "MIGRATE" and e["pod"].startswith("ps") for e in r.trace)


def test_slow_worker_diagnosed_as_straggler():
    r = run_scenario(load_scenario("wd_straggler"))
    assert "WORKER_STRAGGLER" in [d["reason"] for d in r.decisions]


def test_hot_ps_replaced():
    r = run_scenario(load_scenario("wd_hotps"))
    assert "HOT_PS_REPLACE" in [d["reason"] for d in r.decisions]
    assert r.completed and r.conserved


def test_allreduce_world_rebuilt_on_preemption():
    r = run_scenario(load_scenario("ar_small"))
    assert r.completed and r.conserved
    worlds = [e for e in r.trace if e["kind"] == "WORLD"]
    assert [w["epoch"] for w in worlds] == sorted(w["epoch"] for w in worlds)
    assert all(h["reason"] == "world_rebuild" for h in r.halts)
    assert run_scenario(load_scenario("ar_small").with_policy(PolicyKind.STATIC)).status == "FAILED"


def test_allreduce_global_batch_constant(cfg):
    sc = load_scenario("ar_small")
    sim = Simulation(sc).start()
    seen = set()
    while sim.status == "RUNNING":
        sim.run_until(sim.now + 5.0)
        active = [r for r in sim.workers.values() if r.rate > 0]
        if active:
            seen.add(len(active))
            steps_per_s = sum(r.rate for r in active) / (
                sc.job.global_batch_multiple * sc.job.batch_size_per_worker)
            minibatches = [r.rate / sc.job.batch_size_per_worker / steps_per_s for r in active]
            # every step processes exactly N mini-batches regardless of world size
            assert minibatches == pytest.approx([round(m) for m in minibatches])
            assert max(minibatches) - min(minibatches) <= 1 + 1e-9
    assert len(seen) > 1


# -- PS scaling accounting -----------------------------------------------------------------

def test_no_steps_while_ps_halted():
    r = run_scenario(load_scenario("xdfm"))
    thr = dict((round(t, 6), v) for t, v in r.series["throughput"])
    for h in r.halts:
        ticks = [t for t in thr if h["start"] + 15.0 <= t <= h["end"]]
        assert all(thr[t] == 0.0 for t in ticks)
    halted = sum(h["end"] - h["start"] for h in r.halts if h["reason"] == "ps_scale")
    assert halted > 0


# -- report ------------------------------------------------------------------------------------

def _schema(report):
    d = report.to_dict()
    return {
        "top": sorted(d),
        "series": {k: list(SERIES_COLUMNS[k]) for k in sorted(d["series"])},
        "pod": sorted(d["pods"][0]),
        "halt": sorted(d["halts"][0]) if d["halts"] else [],
        "plan": sorted(d["plans"][0]),
        "decision": sorted(d["decisions"][0]),
    }


def test_report_schema_matches_golden():
    report = run_scenario(load_scenario("xdfm"))
    with open(GOLDEN, encoding="utf-8") as fh:
        golden = json.load(fh)
    assert _schema(report) == golden
    assert sorted(REPORT_KEYS) == golden["top"]


def test_report_round_trip():
    report = run_scenario(load_scenario("ar_small"))
    again = SimReport.from_json(report.to_json())
    assert again.to_json() == report.to_json()
    with pytest.raises(ValueError, match="not a report"):
        SimReport.from_dict({"scenario": "x"})


def test_report_csv_series():
    report = run_scenario(load_scenario("xdfm"))
    lines = report.series_csv("throughput").splitlines()
    assert lines[0] == "time,steps_per_s" and len(lines) == len(report.series["throughput"]) + 1
    util = report.series_csv("ps_util").splitlines()
    assert util[0] == "time,ps,utilization"
    with pytest.raises(KeyError):
        report.series_csv("nope")


def test_bundled_scenarios_load():
    names = bundled_names()
    assert {"wd", "xdfm"} <= set(names)
    for n in names:
        assert load_scenario(n).name == n


# -- baselines ----------------------------------------------------------------------------

def _time_to_reach(report, target_steps):
    for t, v in report.series["throughput"]:
        if v >= target_steps:
            return t
    return math.inf


@pytest.mark.parametrize("name", ["wd", "xdfm"])
def test_dlrover_reaches_near_best_before_baselines(name):
    sc = load_scenario(name)
    best, _, _ = best_plan(name)
    target = 0.95 * best / sc.job.batch_size_per_worker
    times = {p: _time_to_reach(run_scenario(sc.with_policy(p)), target)
             for p in (PolicyKind.DLROVER, PolicyKind.AUTOSCALE, PolicyKind.OPTIMUS)}
    assert times[PolicyKind.DLROVER] < math.inf
    assert times[PolicyKind.DLROVER] < times[PolicyKind.AUTOSCALE]
    assert times[PolicyKind.DLROVER] < times[PolicyKind.OPTIMUS]


def test_baselines_grow_their_plans():
    sc = load_scenario("wd")
    for policy in (PolicyKind.AUTOSCALE, PolicyKind.OPTIMUS):
        r = run_scenario(sc.with_policy(policy))
        assert r.completed
        assert "GROW" in [d["reason"] for d in r.decisions]

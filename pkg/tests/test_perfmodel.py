import pytest
from hypothesis import given, strategies as st

from elasticplan.coord import Placement
from elasticplan.model import ClusterConfig, NodeSpec
from elasticplan.perfmodel import (InvalidResource, compute_time, job_throughput, plan_throughput,
                                   ps_update_times, step_time, update_time)

from conftest import make_job, make_plan


def test_zero_workload_is_io_only(cfg):
    job = make_job(workload_compute=0.0, workload_update=0.0, io_time=0.1)
    assert step_time(job, 4, 16, cfg).total == pytest.approx(0.1)


def test_hand_evaluated_step(cfg):
    job = make_job(workload_compute=2.0, required_worker_cpu=4.0, workload_update=8.0,
                   required_ps_cpu_per_worker=8.0, io_time=0.1)
    b = step_time(job, 2, 16, cfg)
    assert b.t_compute == pytest.approx(1.0)
    assert b.t_update == pytest.approx(1.0)
    assert b.total == pytest.approx(2.1)
    assert b.as_dict()["total"] == pytest.approx(2.1)


def test_compute_saturates_at_demand(cfg):
    job = make_job(required_worker_cpu=2.0)
    assert compute_time(job, 4, cfg) == compute_time(job, 8, cfg)


def test_zero_workers_zero_throughput(cfg):
    assert job_throughput(make_job(), 0, 4, 16, cfg) == 0.0


def test_single_worker_throughput(cfg):
    job = make_job(workload_compute=2.0, required_worker_cpu=4.0, workload_update=8.0,
                   required_ps_cpu_per_worker=8.0, io_time=0.1)
    assert job_throughput(job, 1, 2, 16, cfg) == pytest.approx(512 / 2.1)
    assert job_throughput(job, 1, 2, 16, cfg) == pytest.approx(243.81, abs=0.01)


@pytest.mark.parametrize("call", [
    lambda j, c: compute_time(j, 0, c),
    lambda j, c: update_time(j, 0, 1, c),
    lambda j, c: job_throughput(j, -1, 4, 16, c),
    lambda j, c: ps_update_times(j, [0.0], [1.0], 1, c),
])
def test_invalid_resource(cfg, call):
    with pytest.raises(InvalidResource, match="invalid resource"):
        call(make_job(), cfg)


def test_update_time_saturates_with_workers(cfg):
    job = make_job(required_ps_cpu_per_worker=4.0)
    # 4 workers fit on 16 PS cores; the fifth starts sharing
    assert update_time(job, 16, 4, cfg) == update_time(job, 16, 1, cfg)
    assert update_time(job, 16, 8, cfg) == pytest.approx(2 * update_time(job, 16, 4, cfg))


def test_cpu_rate_scales_times():
    job = make_job()
    fast = ClusterConfig(cpu_rate_r=2.0)
    assert compute_time(job, 2, fast) == pytest.approx(compute_time(job, 2, ClusterConfig()) / 2)


def test_even_plan_matches_job_throughput(cfg):
    job = make_job()
    plan = make_plan(24, 3, 8)
    assert plan_throughput(job, plan, cfg) == pytest.approx(job_throughput(job, 24, 3, 128, cfg))


def test_hot_ps_bounds_step(cfg):
    job = make_job()
    plan = make_plan(24, 3, 4)
    shares = Placement.skewed(7, tensors=8).shares(4)
    assert plan_throughput(job, plan, cfg, shares) < plan_throughput(job, plan, cfg)


def test_bigger_hot_ps_helps(cfg):
    job = make_job()
    shares = [0.55, 0.15, 0.15, 0.15]
    plan = make_plan(24, 3, 4)
    bigger = plan.model_copy(update={"per_node_overrides": {"ps-0": NodeSpec(cpu_cores=32, memory_mb=8192)}})
    assert plan_throughput(job, bigger, cfg, shares) > plan_throughput(job, plan, cfg, shares)


def test_slow_ps_bounds_step(cfg):
    job = make_job()
    times = ps_update_times(job, [16, 16], [0.5, 0.5], 8, cfg, speeds=[1.0, 0.25])
    assert times[1] == pytest.approx(4 * times[0])


@given(n=st.integers(1, 64), w=st.floats(0.5, 32), s=st.floats(1, 256), dw=st.floats(0, 16),
       ds=st.floats(0, 64))
def test_throughput_monotone_in_resources(n, w, s, dw, ds):
    job, cfg = make_job(), ClusterConfig()
    base = job_throughput(job, n, w, s, cfg)
    assert job_throughput(job, n, w + dw, s, cfg) >= base * (1 - 1e-12)
    assert job_throughput(job, n, w, s + ds, cfg) >= base * (1 - 1e-12)


@given(n=st.integers(1, 64), w=st.floats(0.5, 32), s=st.floats(1, 256))
def test_throughput_bounded_by_ideal(n, w, s):
    job, cfg = make_job(), ClusterConfig()
    ideal = n * job.batch_size_per_worker / step_time(job, job.required_worker_cpu, 1e9, cfg).total
    assert job_throughput(job, n, w, s, cfg) <= ideal * (1 + 1e-12)


@given(n_ps=st.integers(1, 8), n=st.integers(1, 32), cpu=st.integers(1, 32))
def test_even_shares_match_update_time(n_ps, n, cpu):
    job, cfg = make_job(), ClusterConfig()
    times = ps_update_times(job, [cpu] * n_ps, [1 / n_ps] * n_ps, n, cfg)
    assert max(times) == pytest.approx(update_time(job, cpu * n_ps, n, cfg))

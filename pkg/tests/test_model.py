import json

import pytest
from hypothesis import given, strategies as st
from pydantic import ValidationError

from elasticplan.model import (ClusterConfig, FormatError, JobSpec, NodeSpec, ResourcePlan,
                               RuntimeStats, from_json, to_json, validate_plan)

from conftest import make_job, make_plan


def test_well_tuned_wd_plan_is_feasible(cfg):
    assert validate_plan(make_plan(24, 3, 8), cfg, 200) == []


def test_zero_workers_violation(cfg):
    v = validate_plan(make_plan(0, 3, 1), cfg, 200)
    assert any("worker_count >= 1 required for running job" in x for x in v)


def test_per_pod_cap_violation(cfg):
    v = validate_plan(make_plan(1, 40, 1), cfg, 200)
    assert any("per-pod cap" in x for x in v)


def test_quota_and_ps_capacity_violations(cfg):
    v = validate_plan(make_plan(30, 8, 2), cfg, 200, s_hat=5.7)
    assert any("quota exceeded" in x for x in v)
    assert any("ps capacity" in x for x in v)


def test_override_for_unknown_node(cfg):
    plan = make_plan(2, 4, 2, per_node_overrides={"ps-5": NodeSpec(cpu_cores=24, memory_mb=8192)})
    assert any("unknown node" in x for x in validate_plan(plan, cfg, 200))


def test_low_priority_workers_excluded_from_quota():
    plan = make_plan(10, 4, 1, low_priority_workers=3)
    assert plan.total_cpu() == 56
    assert plan.quota_cpu() == 44
    assert plan.worker_spec(9).low_priority and not plan.worker_spec(6).low_priority


def test_low_priority_cannot_exceed_workers():
    with pytest.raises(ValidationError):
        make_plan(2, 4, 1, low_priority_workers=3)


def test_override_changes_ps_cpu_total():
    plan = make_plan(4, 4, 2, per_node_overrides={"ps-1": NodeSpec(cpu_cores=24, memory_mb=8192)})
    assert plan.ps_cpu_total() == 40
    assert "ps-1=24cpu" in plan.describe()


def test_infeasible_job_rejected():
    with pytest.raises(ValidationError, match="job infeasible"):
        make_job(quota_cpu=7)


def test_ps_job_needs_ps_demand():
    with pytest.raises(ValidationError):
        make_job(required_ps_cpu_per_worker=0.0)


def test_runtime_stats_rejects_usage_above_allocation():
    with pytest.raises(ValidationError, match="exceeds allocation"):
        RuntimeStats(job_id="j", worker_used_cpu=[5.0], worker_alloc_cpu=[4])


def test_runtime_stats_derived_values():
    s = RuntimeStats(job_id="j", worker_used_cpu=[2.0, 3.0], worker_alloc_cpu=[4, 4],
                     ps_used_cpu=[8.0, 4.0], ps_alloc_cpu=[16, 16])
    assert s.n_workers == 2 and s.w_hat == 2.5
    assert s.s_total_used == 12.0 and s.s_hot == 8.0
    assert s.ps_utilization() == [0.5, 0.25]
    assert s.worker_utilization() == [0.5, 0.75]


def test_cluster_config_cap_below_ps_unit():
    with pytest.raises(ValidationError):
        ClusterConfig(c_max=8, ps_cpu_unit=16)


def test_from_json_reports_line_of_bad_field():
    text = '{\n  "cpu_cores": 4,\n  "memory_mb": -1\n}'
    with pytest.raises(FormatError) as err:
        from_json(NodeSpec, text)
    assert err.value.line == 3
    assert "line 3" in str(err.value) and "None" not in str(err.value)


def test_from_json_reports_syntax_position():
    with pytest.raises(FormatError) as err:
        from_json(NodeSpec, '{\n "cpu_cores": 4,,\n}')
    assert err.value.line == 2 and err.value.column is not None


def test_to_json_sorted_and_stable():
    plan = make_plan(3, 4, 1)
    text = to_json(plan)
    assert text == to_json(from_json(ResourcePlan, text))
    keys = list(json.loads(text))
    assert keys == sorted(keys)


node_specs = st.builds(NodeSpec, cpu_cores=st.integers(1, 64), memory_mb=st.integers(1, 1 << 18),
                       low_priority=st.booleans())


@given(workers=st.integers(0, 64), ps=st.integers(0, 16), w=node_specs, p=node_specs,
       low=st.integers(0, 64))
def test_plan_json_round_trip(workers, ps, w, p, low):
    low = min(low, workers)
    plan = ResourcePlan(worker_count=workers, worker=w, ps_count=ps, ps=p, low_priority_workers=low)
    assert from_json(ResourcePlan, to_json(plan)) == plan
    assert plan.quota_cpu() <= plan.total_cpu()


@given(quota=st.integers(1, 400), w=st.floats(0.1, 40), s=st.floats(0.1, 40))
def test_job_feasibility_rule(quota, w, s):
    kw = dict(quota_cpu=quota, required_worker_cpu=w, required_ps_cpu_per_worker=s)
    if quota >= w + s:
        assert make_job(**kw).quota_cpu == quota
    else:
        with pytest.raises(ValidationError):
            make_job(**kw)

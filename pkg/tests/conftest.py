import pytest

from elasticplan.model import ClusterConfig, JobSpec, NodeSpec, ResourcePlan, RuntimeStats


def make_job(**kw) -> JobSpec:
    base = dict(job_id="job", batch_size_per_worker=512, dataset_size=512 * 400, quota_cpu=200,
                workload_compute=0.06, workload_update=0.31, io_time=0.004,
                required_worker_cpu=2.5, required_ps_cpu_per_worker=5.7, model_memory_mb=2000)
    base.update(kw)
    return JobSpec(**base)


def make_plan(workers: int, worker_cpu: int, ps: int, ps_cpu: int = 16, **kw) -> ResourcePlan:
    return ResourcePlan(worker_count=workers, worker=NodeSpec(cpu_cores=worker_cpu, memory_mb=4096),
                        ps_count=ps, ps=NodeSpec(cpu_cores=ps_cpu, memory_mb=8192), **kw)


def sampled_stats(w_hat: float, s_total: float, job_id: str = "job", n: int = 1,
                  worker_alloc: int = 32, ps_alloc: int = 16) -> RuntimeStats:
    return RuntimeStats(job_id=job_id, worker_used_cpu=[w_hat] * n,
                        worker_alloc_cpu=[worker_alloc] * n, ps_used_cpu=[s_total],
                        ps_alloc_cpu=[ps_alloc], worker_used_mem=[1000.0] * n,
                        ps_used_mem=[1000.0])


@pytest.fixture
def cfg() -> ClusterConfig:
    return ClusterConfig()

"""Step-time and throughput model for parameter-server training.

A worker step is ``t_io + t_compute + t_update`` where::

    t_compute = W_compute / (r * min(w, w_hat))
    t_update  = n * W_update / (r * min(s_total, n * s_hat))

Every one of the ``n`` workers pushes ``W_update`` core-seconds of update work
per step to the PS group, which can devote at most ``min(s_total, n*s_hat)``
cores to it. With one worker this reduces to ``W_update / (r*min(s_total, s_hat))``
and throughput saturates once ``n * s_hat`` reaches ``s_total``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

from .model import ClusterConfig, JobSpec, ResourcePlan

logger = logging.getLogger(__name__)


class InvalidResource(ValueError):
    pass


@dataclass(frozen=True)
class StepTimeBreakdown:
    t_io: float
    t_compute: float
    t_update: float

    @property
    def total(self) -> float:
        return self.t_io + self.t_compute + self.t_update

    def as_dict(self) -> Dict[str, float]:
        d = asdict(self)
        d["total"] = self.total
        return d


def compute_time(job: JobSpec, worker_cpu: float, cfg: ClusterConfig) -> float:
    if worker_cpu <= 0:
        raise InvalidResource("invalid resource: worker_cpu must be positive")
    if job.workload_compute == 0:
        return 0.0
    return job.workload_compute / (cfg.cpu_rate_r * min(worker_cpu, job.required_worker_cpu))


def update_time(job: JobSpec, s_total: float, n_workers: int, cfg: ClusterConfig) -> float:
    if s_total <= 0:
        raise InvalidResource("invalid resource: s_total must be positive")
    if job.workload_update == 0:
        return 0.0
    n = max(1, n_workers)
    per_worker_cores = min(s_total / n, job.required_ps_cpu_per_worker)
    return job.workload_update / (cfg.cpu_rate_r * per_worker_cores)


def step_time(
    job: JobSpec,
    worker_cpu: float,
    s_total: float,
    cfg: ClusterConfig,
    n_workers: int = 1,
) -> StepTimeBreakdown:
    """Per-worker step time with ``n_workers`` sharing the PS group."""
    return StepTimeBreakdown(
        t_io=job.io_time,
        t_compute=compute_time(job, worker_cpu, cfg),
        t_update=update_time(job, s_total, n_workers, cfg),
    )


def job_throughput(
    job: JobSpec,
    n_workers: int,
    worker_cpu: float,
    s_total: float,
    cfg: ClusterConfig,
) -> float:
    """Aggregate samples per second of ``n_workers`` homogeneous workers."""
    if n_workers < 0:
        raise InvalidResource("invalid resource: n_workers must be non-negative")
    if n_workers == 0:
        return 0.0
    total = step_time(job, worker_cpu, s_total, cfg, n_workers).total
    if total <= 0:
        return float("inf")
    return n_workers * job.batch_size_per_worker / total


def ps_update_times(
    job: JobSpec,
    ps_cpus: Sequence[float],
    shares: Sequence[float],
    n_workers: int,
    cfg: ClusterConfig,
    speeds: Optional[Sequence[float]] = None,
) -> list:
    """Per-PS time to apply one worker's update when PS ``j`` holds ``shares[j]``.

    Each worker can claim ``min(s_j / n, share_j * s_hat)`` cores of PS ``j``.
    With equal shares and equal CPUs every entry equals :func:`update_time`.
    """
    if len(ps_cpus) != len(shares):
        raise ValueError("ps_cpus and shares must have equal length")
    if speeds is None:
        speeds = [1.0] * len(ps_cpus)
    n = max(1, n_workers)
    out = []
    for cpu, share, speed in zip(ps_cpus, shares, speeds):
        if cpu <= 0:
            raise InvalidResource("invalid resource: PS cpu must be positive")
        if share <= 0 or job.workload_update == 0:
            out.append(0.0)
            continue
        cores = min(cpu / n, share * job.required_ps_cpu_per_worker)
        out.append(share * job.workload_update / (cfg.cpu_rate_r * cores * speed))
    return out


def plan_throughput(
    job: JobSpec,
    plan: ResourcePlan,
    cfg: ClusterConfig,
    shares: Optional[Sequence[float]] = None,
) -> float:
    """Samples per second of a full plan, honouring per-node overrides.

    The PS group is modelled per PS (the slowest PS bounds every step); with
    even shares and no overrides this equals :func:`job_throughput`.
    """
    if plan.worker_count == 0 or plan.ps_count == 0:
        return 0.0
    if shares is None:
        shares = [1.0 / plan.ps_count] * plan.ps_count
    n = plan.worker_count
    t_up = max(ps_update_times(job, [s.cpu_cores for s in plan.ps_specs()], shares, n, cfg))
    rate = 0.0
    for spec in plan.worker_specs():
        total = job.io_time + compute_time(job, spec.cpu_cores, cfg) + t_up
        rate += job.batch_size_per_worker / total
    return rate

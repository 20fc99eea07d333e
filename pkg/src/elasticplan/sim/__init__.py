"""Discrete-event cluster simulator, policies and scenario files."""

from __future__ import annotations

from typing import Optional, Sequence

from ..model import ClusterConfig, JobSpec, NodeSpec, ResourcePlan, RuntimeStats
from .engine import Pod, PodPhase, Simulation, SimulationError, pending_time
from .policies import Policy
from .report import REPORT_KEYS, SimReport
from .scenario import (FaultEntry, FaultKind, PlacementSpec, PolicyKind, Scenario, ScalerConfig,
                       SimSettings, bundled_names, load_scenario)

__all__ = [
    "FaultEntry", "FaultKind", "PlacementSpec", "Pod", "PodPhase", "Policy", "PolicyKind",
    "REPORT_KEYS", "Scenario", "ScalerConfig", "SimReport", "SimSettings", "Simulation",
    "SimulationError", "bundled_names", "inject_fault", "load_scenario", "measure_throughput",
    "pending_time", "run_scenario", "sample_stats",
]


def run_scenario(scenario: Scenario, seed: Optional[int] = None) -> SimReport:
    """Run one scenario from submission to completion or failure."""
    return SimReport.from_simulation(Simulation(scenario, seed).run())


def inject_fault(sim: Simulation, entry: FaultEntry) -> Simulation:
    """Apply a fault to a running simulation immediately."""
    sim.sc = sim.sc.model_copy(update={"faults": list(sim.sc.faults) + [entry]})
    sim._h_fault(len(sim.sc.faults) - 1)
    return sim


def sample_stats(sim: Simulation, window_s: float) -> RuntimeStats:
    """Stats over the last ``window_s`` seconds ending now, from the tick mark if closer."""
    mark = sim._tick_mark
    if mark is None or sim.now - mark.time > window_s:
        raise ValueError("window longer than the data retained since the last tick")
    return sim.stats_since(mark)


class _FixedPlan(Policy):
    def __init__(self, plan: ResourcePlan):
        super().__init__()
        self.plan = plan

    def on_start(self, sim: Simulation) -> None:
        sim.apply_plan(self.plan, "FIXED")


def measure_throughput(job: JobSpec, plan: ResourcePlan, cfg: Optional[ClusterConfig] = None,
                       shares: Optional[Sequence[float]] = None, shards: int = 64) -> float:
    """Steady-state throughput (samples/s) of ``plan`` measured by simulation.

    Pods start instantly; throughput is samples processed over a window of
    ``shards`` shard completions taken after every worker has joined, in the
    same unit as :func:`elasticplan.perfmodel.job_throughput`.
    """
    cfg = cfg or ClusterConfig()
    shard = 4 * job.batch_size_per_worker
    # enough data that the window never reaches the end of an epoch
    size = max(job.dataset_size, shard * (shards + 4 * max(1, plan.worker_count)) * 4)
    job = job.model_copy(update={"dataset_size": size, "epochs": 1})
    scenario = Scenario(name="steady", job=job, cluster=cfg, static_plan=plan,
                        sim=SimSettings(shard_size=shard, checkpoint_interval_steps=10**9))
    sim = Simulation(scenario, policy=_FixedPlan(plan), steady=True)
    if shares is not None:
        from ..coord import ParamPartition
        sim.partition = ParamPartition(len(shares), tuple(shares), job.model_memory_mb)
    sim._stop_after_completions = plan.worker_count  # warm-up until every worker has joined
    sim.run()
    if sim.status != "MEASURED":
        raise SimulationError(f"steady measurement ended with {sim.status}", sim.state_dump())
    mark = sim.capture_mark()
    sim.status = "RUNNING"
    sim._stop_after_completions = sim.shard_completions + shards
    sim.run_loop()
    return (sim.global_samples() - mark.samples) / (sim.now - mark.time)

"""Scenario files: job, cluster, policy, baseline settings and fault schedule."""

from __future__ import annotations

import logging
import os
from enum import Enum
from importlib import resources
from typing import List, Optional

from pydantic import Field, ValidationError, model_validator

from ..brain import BrainConfig
from ..coord import Placement, PlacementKind
from ..model import ClusterConfig, FormatError, FrozenModel, JobMode, JobSpec, NodeSpec, ResourcePlan, from_json

logger = logging.getLogger(__name__)


class PolicyKind(str, Enum):
    DLROVER = "dlrover"
    STATIC = "static"
    AUTOSCALE = "autoscale"
    OPTIMUS = "optimus"


class FaultKind(str, Enum):
    PREEMPT = "PREEMPT"
    SLOW = "SLOW"
    OOM = "OOM"


class FaultEntry(FrozenModel):
    """One injected fault.

    ``target`` is ``worker:random``, ``ps:random``, ``worker:<n>`` (n-th
    running worker by age), ``ps:<index>`` (PS task index) or a pod id.
    """

    time: Optional[float] = Field(default=None, ge=0.0)
    step: Optional[int] = Field(default=None, ge=0)
    target: str
    fault: FaultKind
    factor: float = Field(default=0.25, gt=0.0, le=1.0)
    demand_mb: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "FaultEntry":
        if (self.time is None) == (self.step is None):
            raise ValueError("fault entry needs exactly one of time or step")
        if self.fault is FaultKind.OOM and self.demand_mb is None:
            raise ValueError("OOM fault needs demand_mb")
        role, _, rest = self.target.partition(":")
        if rest and role not in ("worker", "ps"):
            raise ValueError(f"bad fault target {self.target}")
        return self


class PlacementSpec(FrozenModel):
    kind: PlacementKind = PlacementKind.EVEN
    seed: Optional[int] = None
    tensors: int = Field(default=64, ge=1)
    sigma: float = Field(default=1.0, gt=0.0)

    def resolve(self, fallback_seed: int) -> Placement:
        seed = self.seed if self.seed is not None else fallback_seed
        return Placement(self.kind, seed, self.tensors, self.sigma)


class ScalerConfig(FrozenModel):
    """Settings for the worker-only auto-scaler and the fixed-increment scaler."""

    initial: ResourcePlan
    worker_step: int = Field(default=4, ge=0)
    ps_step: int = Field(default=0, ge=0)
    interval_s: float = Field(default=180.0, gt=0.0)
    efficiency_threshold: float = Field(default=0.3)
    min_gain: float = Field(default=0.05)


class SimSettings(FrozenModel):
    tick_s: float = Field(default=15.0, gt=0.0)
    checkpoint_interval_steps: int = Field(default=100, ge=1)
    shard_size: Optional[int] = Field(default=None, ge=1)
    wait_retry_s: float = Field(default=1.0, gt=0.0)
    max_time_s: float = Field(default=1.0e6, gt=0.0)
    ps_memory_overhead_mb: int = Field(default=512, ge=0)
    world_rebuild_s: Optional[float] = Field(default=None, ge=0.0)


class Scenario(FrozenModel):
    name: str
    description: str = ""
    job: JobSpec
    cluster: ClusterConfig = Field(default_factory=ClusterConfig)
    policy: PolicyKind = PolicyKind.DLROVER
    seed: int = 0
    static_plan: ResourcePlan
    placement: PlacementSpec = Field(default_factory=PlacementSpec)
    faults: List[FaultEntry] = Field(default_factory=list)
    brain: BrainConfig = Field(default_factory=BrainConfig)
    sim: SimSettings = Field(default_factory=SimSettings)
    autoscale: Optional[ScalerConfig] = None
    optimus: Optional[ScalerConfig] = None

    @model_validator(mode="after")
    def _check(self) -> "Scenario":
        if self.job.mode is JobMode.PS_ASYNC and self.static_plan.ps_count < 1:
            raise ValueError("PS jobs need a static plan with at least one PS")
        if self.static_plan.worker_count < 1:
            raise ValueError("static plan needs at least one worker")
        if self.job.mode is JobMode.ALLREDUCE and self.job.global_batch_multiple is None:
            raise ValueError("allreduce jobs need global_batch_multiple")
        return self

    def shard_size(self) -> int:
        return self.sim.shard_size or 4 * self.job.batch_size_per_worker

    def with_policy(self, policy: PolicyKind) -> "Scenario":
        return self.model_copy(update={"policy": policy})

    def with_faults(self, faults: List[FaultEntry]) -> "Scenario":
        return self.model_copy(update={"faults": list(faults)})

    def with_quota(self, quota: int) -> "Scenario":
        # revalidate so an infeasible quota is rejected like in a scenario file
        try:
            job = JobSpec.model_validate({**self.job.model_dump(), "quota_cpu": quota})
        except ValidationError as exc:
            raise FormatError(exc.errors()[0]["msg"]) from exc
        return self.model_copy(update={"job": job})


def bundled_names() -> List[str]:
    root = resources.files("elasticplan").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scenario(name_or_path: str) -> Scenario:
    """Load a scenario from a file path or a bundled scenario name."""
    if os.path.exists(name_or_path):
        with open(name_or_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    else:
        res = resources.files("elasticplan").joinpath("scenarios", f"{name_or_path}.json")
        if not res.is_file():
            raise FileNotFoundError(f"no scenario file or bundled scenario named {name_or_path!r}")
        text = res.read_text(encoding="utf-8")
    try:
        return from_json(Scenario, text)
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def default_node(cpu: int, mem: int) -> NodeSpec:
    return NodeSpec(cpu_cores=cpu, memory_mb=mem)

"""Shared domain types for jobs, resources, runtime statistics and plans.

All types are immutable pydantic models so they can be copied freely between
threads and round-tripped through JSON, which is the single text format used
for scenarios, plans, audit logs and reports.
"""

from __future__ import annotations

import json
import logging
from enum import Enum
from typing import Dict, List, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

logger = logging.getLogger(__name__)

T = TypeVar("T", bound=BaseModel)


class FrozenModel(BaseModel):
    """Base class for immutable value types."""

    model_config = ConfigDict(frozen=True, extra="forbid")


class Role(str, Enum):
    WORKER = "WORKER"
    PS = "PS"
    MASTER = "MASTER"


class JobMode(str, Enum):
    PS_ASYNC = "PS_ASYNC"
    ALLREDUCE = "ALLREDUCE"


class NodeSpec(FrozenModel):
    """CPU and memory allocation for one pod."""

    cpu_cores: int = Field(ge=1)
    memory_mb: int = Field(ge=1)
    low_priority: bool = False


class ResourcePlan(FrozenModel):
    """Node counts and per-node resources for both roles.

    ``per_node_overrides`` maps node ids of the form ``ps-<index>`` (or
    ``worker-<index>``) to a replacement spec, used for hot PS replacement.
    ``low_priority_workers`` counts trailing workers that may exceed the quota
    because they are preemptible.
    """

    worker_count: int = Field(ge=0)
    worker: NodeSpec
    ps_count: int = Field(ge=0)
    ps: NodeSpec
    per_node_overrides: Dict[str, NodeSpec] = Field(default_factory=dict)
    low_priority_workers: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_low_priority(self) -> "ResourcePlan":
        if self.low_priority_workers > self.worker_count:
            raise ValueError("low_priority_workers exceeds worker_count")
        return self

    def ps_spec(self, index: int) -> NodeSpec:
        return self.per_node_overrides.get(f"ps-{index}", self.ps)

    def worker_spec(self, index: int) -> NodeSpec:
        spec = self.per_node_overrides.get(f"worker-{index}", self.worker)
        if index >= self.worker_count - self.low_priority_workers and not spec.low_priority:
            spec = spec.model_copy(update={"low_priority": True})
        return spec

    def ps_specs(self) -> List[NodeSpec]:
        return [self.ps_spec(i) for i in range(self.ps_count)]

    def worker_specs(self) -> List[NodeSpec]:
        return [self.worker_spec(i) for i in range(self.worker_count)]

    def ps_cpu_total(self) -> int:
        return sum(s.cpu_cores for s in self.ps_specs())

    def total_cpu(self) -> int:
        return sum(s.cpu_cores for s in self.worker_specs()) + self.ps_cpu_total()

    def quota_cpu(self) -> int:
        """CPU counted against the job quota; low-priority nodes are excluded."""
        nodes = self.worker_specs() + self.ps_specs()
        return sum(s.cpu_cores for s in nodes if not s.low_priority)

    def describe(self) -> str:
        text = (
            f"{self.worker_count}x{self.worker.cpu_cores}cpu workers, "
            f"{self.ps_count}x{self.ps.cpu_cores}cpu PS"
        )
        if self.low_priority_workers:
            text += f" ({self.low_priority_workers} low-priority)"
        if self.per_node_overrides:
            extra = ", ".join(
                f"{k}={v.cpu_cores}cpu" for k, v in sorted(self.per_node_overrides.items())
            )
            text += f" [{extra}]"
        return text


class JobSpec(FrozenModel):
    """A training job and its hidden ground-truth resource demand.

    ``required_worker_cpu``, ``required_ps_cpu_per_worker`` and
    ``worker_memory_mb`` (actual per-worker memory demand) are only visible to
    the simulator; planners see them through sampled usage.
    """

    job_id: str
    mode: JobMode = JobMode.PS_ASYNC
    batch_size_per_worker: int = Field(ge=1)
    dataset_size: int = Field(ge=1)
    epochs: int = Field(default=1, ge=1)
    quota_cpu: int = Field(ge=1)
    workload_compute: float = Field(ge=0.0)
    workload_update: float = Field(ge=0.0)
    io_time: float = Field(default=0.0, ge=0.0)
    required_worker_cpu: float = Field(gt=0.0)
    required_ps_cpu_per_worker: float = Field(ge=0.0)
    model_memory_mb: int = Field(ge=1)
    worker_memory_mb: int = Field(default=2048, ge=1)
    dataset_id: Optional[str] = None
    global_batch_multiple: Optional[int] = Field(default=None, ge=1)
    allreduce_latency_s: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _check_feasible(self) -> "JobSpec":
        if self.mode is JobMode.PS_ASYNC and self.required_ps_cpu_per_worker <= 0:
            raise ValueError("required_ps_cpu_per_worker must be positive for PS jobs")
        need = self.required_worker_cpu + self.required_ps_cpu_per_worker
        if self.quota_cpu < need:
            raise ValueError(
                f"job infeasible: quota {self.quota_cpu} < per-worker demand {need:g}"
            )
        return self

    @property
    def total_samples(self) -> int:
        return self.dataset_size * self.epochs


class RuntimeStats(FrozenModel):
    """Usage sampled over one window by the pod watcher.

    Per-node lists are index-aligned with ``worker_ids`` / ``ps_ids`` when those
    are given. ``throughput`` is in global steps per second.
    """

    job_id: str
    window_start_step: int = 0
    window_end_step: int = 0
    worker_used_cpu: List[float] = Field(default_factory=list)
    ps_used_cpu: List[float] = Field(default_factory=list)
    worker_used_mem: List[float] = Field(default_factory=list)
    ps_used_mem: List[float] = Field(default_factory=list)
    throughput: float = Field(default=0.0, ge=0.0)
    timestamp: float = 0.0
    window_start_time: float = 0.0
    worker_ids: List[str] = Field(default_factory=list)
    ps_ids: List[str] = Field(default_factory=list)
    worker_alloc_cpu: List[int] = Field(default_factory=list)
    ps_alloc_cpu: List[int] = Field(default_factory=list)
    worker_throughput: List[float] = Field(default_factory=list)
    ps_update_time: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_usage(self) -> "RuntimeStats":
        for name in ("worker_used_cpu", "ps_used_cpu", "worker_used_mem", "ps_used_mem",
                     "worker_throughput", "ps_update_time"):
            if any(v < 0 for v in getattr(self, name)):
                raise ValueError(f"{name} has negative values")
        for used, alloc, role in ((self.worker_used_cpu, self.worker_alloc_cpu, "worker"),
                                  (self.ps_used_cpu, self.ps_alloc_cpu, "ps")):
            if not alloc:
                continue
            if len(alloc) != len(used):
                raise ValueError(f"{role} alloc list length mismatch")
            for u, a in zip(used, alloc):
                if u > a + 1e-9:
                    raise ValueError(f"{role} used cpu {u} exceeds allocation {a}")
        return self

    @property
    def n_workers(self) -> int:
        return len(self.worker_used_cpu)

    @property
    def w_hat(self) -> float:
        if not self.worker_used_cpu:
            return 0.0
        return sum(self.worker_used_cpu) / len(self.worker_used_cpu)

    @property
    def s_total_used(self) -> float:
        return sum(self.ps_used_cpu)

    @property
    def s_hot(self) -> float:
        return max(self.ps_used_cpu) if self.ps_used_cpu else 0.0

    def ps_utilization(self) -> List[float]:
        if not self.ps_alloc_cpu:
            return []
        return [u / a for u, a in zip(self.ps_used_cpu, self.ps_alloc_cpu)]

    def worker_utilization(self) -> List[float]:
        if not self.worker_alloc_cpu:
            return []
        return [u / a for u, a in zip(self.worker_used_cpu, self.worker_alloc_cpu)]


class ClusterConfig(FrozenModel):
    """Cluster-wide constants used by the planner and the simulator."""

    c_max: int = Field(default=32, ge=1)
    c_total_default: int = Field(default=200, ge=1)
    cpu_rate_r: float = Field(default=1.0, gt=0.0)
    ps_cpu_unit: int = Field(default=16, ge=1)
    pending_base_s: float = Field(default=5.0, ge=0.0)
    pending_per_cpu_s: float = Field(default=0.5, ge=0.0)
    cpu_util_threshold: float = Field(default=0.9, gt=0.0, le=1.0)
    default_worker_memory_mb: int = Field(default=4096, ge=1)
    default_ps_memory_mb: int = Field(default=8192, ge=1)
    min_memory_mb: Optional[int] = Field(default=None, ge=1)
    max_memory_mb: int = Field(default=196608, ge=1)
    worker_init_s: float = Field(default=90.0, ge=0.0)
    ps_init_s: float = Field(default=90.0, ge=0.0)
    checkpoint_bandwidth_mb_s: float = Field(default=200.0, gt=0.0)
    repartition_s: float = Field(default=0.5, ge=0.0)
    baseline_cpu_overhead: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _check(self) -> "ClusterConfig":
        if self.c_max < self.ps_cpu_unit:
            raise ValueError("c_max must be at least ps_cpu_unit")
        return self

    def clamp_memory(self, memory_mb: int) -> int:
        if self.min_memory_mb is not None:
            memory_mb = max(memory_mb, self.min_memory_mb)
        return min(memory_mb, self.max_memory_mb)


def validate_plan(
    plan: ResourcePlan,
    cfg: ClusterConfig,
    quota: int,
    s_hat: Optional[float] = None,
) -> List[str]:
    """Return every violated feasibility constraint; empty means feasible.

    When ``s_hat`` (per-worker PS demand) is given, the PS capacity constraint
    ``N_w * s_hat <= s_total`` is also checked.
    """
    violations: List[str] = []
    if plan.worker_count < 1:
        violations.append("worker_count >= 1 required for running job")
    nodes = [("worker", i, s) for i, s in enumerate(plan.worker_specs())]
    nodes += [("ps", i, s) for i, s in enumerate(plan.ps_specs())]
    seen_caps = set()
    for role, idx, spec in nodes:
        key = (role, spec.cpu_cores, spec.memory_mb)
        if key in seen_caps:
            continue
        seen_caps.add(key)
        if spec.cpu_cores > cfg.c_max:
            violations.append(
                f"per-pod cap: {role}-{idx} cpu {spec.cpu_cores} > C_max {cfg.c_max}"
            )
        if spec.memory_mb > cfg.max_memory_mb:
            violations.append(
                f"per-pod memory cap: {role}-{idx} memory {spec.memory_mb} > {cfg.max_memory_mb}"
            )
    for key in plan.per_node_overrides:
        role, _, idx = key.partition("-")
        count = plan.ps_count if role == "ps" else plan.worker_count if role == "worker" else -1
        if not idx.isdigit() or int(idx) >= count:
            violations.append(f"override for unknown node {key}")
    used = plan.quota_cpu()
    if used > quota:
        violations.append(f"quota exceeded: {used} > {quota}")
    if s_hat is not None and plan.ps_count > 0:
        demand = plan.worker_count * s_hat
        if demand > plan.ps_cpu_total() + 1e-9:
            violations.append(
                f"ps capacity: demand {demand:g} > ps cpu {plan.ps_cpu_total()}"
            )
    return violations


class FormatError(ValueError):
    """Raised when a serialized document cannot be parsed or validated."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f"line {line}, column {column}: " if column is not None else f"line {line}: "
        super().__init__(f"{loc}{message}")


def to_json(obj: BaseModel, indent: Optional[int] = 2) -> str:
    """Serialize a model with sorted keys so output is byte-stable."""
    return json.dumps(obj.model_dump(mode="json"), sort_keys=True, indent=indent)


def parse_json_text(text: str) -> object:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, exc.lineno, exc.colno) from exc


def from_json(cls: Type[T], text: str) -> T:
    """Parse ``text`` into ``cls``; errors carry the line number when known."""
    data = parse_json_text(text)
    try:
        return cls.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise FormatError(f"{where}: {first['msg']}", _line_of_key(text, first["loc"])) from exc


def _line_of_key(text: str, loc: tuple) -> Optional[int]:
    names = [p for p in loc if isinstance(p, str)]
    if not names:
        return None
    needle = f'"{names[-1]}"'
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def load_file(cls: Type[T], path: str) -> T:
    with open(path, "r", encoding="utf-8") as fh:
        return from_json(cls, fh.read())


def save_file(obj: BaseModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_json(obj))
        fh.write("\n")

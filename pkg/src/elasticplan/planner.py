"""Plan algorithms: initial sampling plan, closed-form optimisation, and repairs.

Every function is stateless: it takes sampled stats and the current plan and
returns a :class:`PlanDecision`. Repairs that would not change anything return
a decision with reason ``NO_CHANGE`` so callers can suppress them uniformly.
"""

from __future__ import annotations

import logging
import math
import statistics
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import Field

from .model import ClusterConfig, FrozenModel, JobSpec, NodeSpec, ResourcePlan, Role, RuntimeStats

logger = logging.getLogger(__name__)

_EPS = 1e-9


class PlannerError(Exception):
    pass


class InfeasibleError(PlannerError):
    pass


class PlanStage(str, Enum):
    SAMPLE = "SAMPLE"
    OPTIMIZE = "OPTIMIZE"
    ADJUST = "ADJUST"

    @property
    def order(self) -> int:
        return ["SAMPLE", "OPTIMIZE", "ADJUST"].index(self.value)


class DecisionReason(str, Enum):
    INITIAL = "INITIAL"
    OOM_WORKER = "OOM_WORKER"
    OOM_PS = "OOM_PS"
    PS_CPU_HIGH = "PS_CPU_HIGH"
    OPTIMIZE_CLOSED_FORM = "OPTIMIZE_CLOSED_FORM"
    IDLE_PS_ADD_WORKERS = "IDLE_PS_ADD_WORKERS"
    HOT_PS_REPLACE = "HOT_PS_REPLACE"
    WORKER_STRAGGLER = "WORKER_STRAGGLER"
    PS_STRAGGLER = "PS_STRAGGLER"
    NO_CHANGE = "NO_CHANGE"


class PlanDecision(FrozenModel):
    """A plan plus why it was produced.

    ``weights`` carries shard dispatch weights and ``migrate`` lists pod ids to
    relaunch on another machine; both leave the resource plan untouched.
    """

    stage: PlanStage
    plan: ResourcePlan
    reason: DecisionReason
    detail: str = ""
    weights: Dict[str, float] = Field(default_factory=dict)
    migrate: List[str] = Field(default_factory=list)

    @property
    def is_change(self) -> bool:
        return self.reason is not DecisionReason.NO_CHANGE


class PlannerConfig(FrozenModel):
    memory_safety: float = Field(default=1.5, gt=0.0)
    max_workers_cap: Optional[int] = Field(default=None, ge=1)
    straggler_ratio: float = Field(default=0.5, gt=0.0, lt=1.0)
    # a straggler whose CPU utilisation is below this fraction of the median is
    # taken to sit on a slow machine rather than to be short of data
    slow_machine_util_ratio: float = Field(default=0.75, gt=0.0, le=1.0)


class HistoryRecord(FrozenModel):
    ps_count: int = Field(ge=1)
    ps_cpu: Optional[int] = Field(default=None, ge=1)
    worker_memory_mb: Optional[int] = Field(default=None, ge=1)


def _no_change(stage: PlanStage, current: ResourcePlan, detail: str) -> PlanDecision:
    return PlanDecision(stage=stage, plan=current, reason=DecisionReason.NO_CHANGE, detail=detail)


def initial_plan(
    job: JobSpec,
    cfg: ClusterConfig,
    history: Optional[Dict[str, HistoryRecord]] = None,
) -> PlanDecision:
    """Sampling plan: one chief worker at C_max plus a few default PS."""
    record = None
    if history and job.dataset_id is not None:
        record = history.get(job.dataset_id)
    n_ps = record.ps_count if record else 1
    ps_cpu = record.ps_cpu if record and record.ps_cpu else cfg.ps_cpu_unit
    worker_mem = (record.worker_memory_mb if record and record.worker_memory_mb
                  else cfg.default_worker_memory_mb)
    quota = job.quota_cpu
    worker_cpu = min(cfg.c_max, quota - n_ps * ps_cpu)
    if worker_cpu < 1:
        raise InfeasibleError(
            f"job infeasible: quota {quota} leaves no CPU for a worker next to {n_ps} PS"
        )
    plan = ResourcePlan(
        worker_count=1,
        worker=NodeSpec(cpu_cores=worker_cpu, memory_mb=cfg.clamp_memory(worker_mem)),
        ps_count=n_ps,
        ps=NodeSpec(cpu_cores=ps_cpu, memory_mb=cfg.clamp_memory(cfg.default_ps_memory_mb)),
    )
    detail = "history lookup" if record else "defaults"
    return PlanDecision(stage=PlanStage.SAMPLE, plan=plan, reason=DecisionReason.INITIAL, detail=detail)


def react_to_oom(
    failed_role: Role,
    current: ResourcePlan,
    cfg: ClusterConfig,
    quota: int,
    stage: PlanStage = PlanStage.SAMPLE,
) -> PlanDecision:
    """Double worker memory, or double the PS count, after an OOM."""
    if failed_role is Role.WORKER:
        mem = current.worker.memory_mb
        if mem >= cfg.max_memory_mb:
            raise InfeasibleError("job infeasible: OOM at cap")
        new_mem = min(2 * mem, cfg.max_memory_mb)
        plan = current.model_copy(
            update={"worker": current.worker.model_copy(update={"memory_mb": new_mem})}
        )
        return PlanDecision(stage=stage, plan=plan, reason=DecisionReason.OOM_WORKER,
                            detail=f"worker memory {mem} -> {new_mem} MiB")
    if failed_role is Role.PS:
        old = current.ps_count
        target = max(1, 2 * old)
        worker_cpu = current.quota_cpu() - current.ps_cpu_total()
        while target > old and worker_cpu + target * current.ps.cpu_cores > quota:
            target -= 1
        if target <= old:
            raise InfeasibleError("job infeasible: OOM at cap (no quota for more PS)")
        plan = current.model_copy(update={"ps_count": target, "per_node_overrides": {}})
        return PlanDecision(stage=stage, plan=plan, reason=DecisionReason.OOM_PS,
                            detail=f"ps count {old} -> {target}")
    raise PlannerError(f"unsupported OOM role {failed_role}")


def compute_worker_count(c_total: int, w_hat: float, s_hat: float) -> int:
    """Largest worker count whose total demand fits the quota (at least 1)."""
    if w_hat <= 0 or s_hat < 0 or w_hat + s_hat <= 0:
        raise PlannerError("w_hat and s_hat must be positive")
    return max(1, math.floor(c_total / (w_hat + s_hat) + _EPS))


def compute_ps_allocation(
    c_total: int, n_w: int, w_hat: float, cfg: ClusterConfig
) -> Tuple[int, int, int]:
    """CPU left for PS after the workers, split into ``ps_cpu_unit`` pods."""
    remaining = c_total - n_w * w_hat
    if remaining <= 0:
        raise PlannerError("no CPU left for PS")
    s_total = math.floor(remaining + _EPS)
    per_ps = cfg.ps_cpu_unit
    n_ps = max(1, s_total // per_ps)
    return s_total, n_ps, per_ps


def sampled_s_hat(stats: RuntimeStats) -> float:
    if stats.n_workers == 0:
        raise PlannerError("insufficient samples")
    return stats.s_total_used / stats.n_workers


def _ceil_cores(x: float) -> int:
    return max(1, math.ceil(x - 1e-6))


def optimize_plan(
    job_id: str,
    stats: RuntimeStats,
    quota: int,
    cfg: ClusterConfig,
    current: Optional[ResourcePlan] = None,
    pcfg: Optional[PlannerConfig] = None,
) -> PlanDecision:
    """Closed-form plan from sampled per-worker demand."""
    pcfg = pcfg or PlannerConfig()
    if stats.n_workers == 0 or not stats.ps_used_cpu:
        raise PlannerError("insufficient samples")
    if stats.job_id != job_id:
        raise PlannerError(f"stats for {stats.job_id} passed for job {job_id}")
    w_hat = stats.w_hat
    s_hat = sampled_s_hat(stats)
    if w_hat <= 0:
        raise PlannerError("insufficient samples: no worker CPU observed")
    n_w = compute_worker_count(quota, w_hat, max(s_hat, _EPS))
    s_total, n_ps, per_ps = compute_ps_allocation(quota, n_w, w_hat, cfg)
    worker_cpu = min(cfg.c_max, _ceil_cores(w_hat))
    # ceil on worker CPU can overrun the quota by up to n_w cores
    while n_w * worker_cpu + n_ps * per_ps > quota:
        if n_ps > 1:
            n_ps -= 1
        elif n_w > 1:
            n_w -= 1
        else:
            raise InfeasibleError("job infeasible: one worker and one PS exceed quota")
    base_worker_mem = current.worker.memory_mb if current else cfg.default_worker_memory_mb
    base_ps_mem = current.ps.memory_mb if current else cfg.default_ps_memory_mb
    peak = max(stats.worker_used_mem) if stats.worker_used_mem else 0.0
    worker_mem = math.ceil(peak * pcfg.memory_safety) if peak > 0 else base_worker_mem
    plan = ResourcePlan(
        worker_count=n_w,
        worker=NodeSpec(cpu_cores=worker_cpu, memory_mb=cfg.clamp_memory(worker_mem)),
        ps_count=n_ps,
        ps=NodeSpec(cpu_cores=per_ps, memory_mb=base_ps_mem),
    )
    detail = (
        f"w_hat={w_hat:.3f} s_hat={s_hat:.3f} -> N_w={n_w} s_total={s_total} N_ps={n_ps}"
    )
    if current is not None and _same_shape(plan, current):
        return _no_change(PlanStage.OPTIMIZE, current, detail)
    return PlanDecision(stage=PlanStage.OPTIMIZE, plan=plan,
                        reason=DecisionReason.OPTIMIZE_CLOSED_FORM, detail=detail)


def _same_shape(a: ResourcePlan, b: ResourcePlan) -> bool:
    return (a.worker_count == b.worker_count and a.ps_count == b.ps_count
            and a.worker == b.worker and a.ps == b.ps
            and a.per_node_overrides == b.per_node_overrides)


def adjust_idle_ps(
    stats: RuntimeStats,
    current: ResourcePlan,
    cfg: ClusterConfig,
    quota: Optional[int] = None,
    pcfg: Optional[PlannerConfig] = None,
) -> PlanDecision:
    """Add workers while the PS group has CPU to spare.

    ``s_hat`` is re-estimated as used PS CPU per worker; the target worker
    count is ``floor(s_total / s_hat)`` (optionally capped). Workers beyond
    the quota are marked low priority.
    """
    pcfg = pcfg or PlannerConfig()
    n_w = stats.n_workers or current.worker_count
    if n_w == 0 or stats.s_total_used <= 0:
        return _no_change(PlanStage.ADJUST, current, "no PS usage observed")
    s_hat = stats.s_total_used / n_w
    s_total = current.ps_cpu_total()
    target = math.floor(s_total / s_hat + _EPS)
    if pcfg.max_workers_cap is not None:
        target = min(target, pcfg.max_workers_cap)
    delta = target - n_w
    detail = f"s_total={s_total} s_hat={s_hat:.3f} N_w={n_w} delta={delta}"
    if delta <= 0:
        return _no_change(PlanStage.ADJUST, current, detail)
    new_count = current.worker_count + delta
    low = 0
    if quota is not None:
        base = current.model_copy(update={"worker_count": new_count, "low_priority_workers": 0})
        excess = base.quota_cpu() - quota
        if excess > 0:
            low = min(delta, math.ceil(excess / current.worker.cpu_cores))
    low = max(low, current.low_priority_workers)
    plan = current.model_copy(update={"worker_count": new_count, "low_priority_workers": low})
    return PlanDecision(stage=PlanStage.ADJUST, plan=plan,
                        reason=DecisionReason.IDLE_PS_ADD_WORKERS, detail=detail)


def hot_ps_cpu(s_hot: float, s_total_used: float, s_hat: float, n_w: int, cfg: ClusterConfig) -> int:
    """Cores for a replacement hot PS, capped at C_max."""
    if s_total_used <= 0:
        return 0
    need = s_hot / s_total_used * s_hat * n_w
    return min(_ceil_cores(need), cfg.c_max)


def adjust_hot_ps(
    stats: RuntimeStats,
    current: ResourcePlan,
    n_w: int,
    cfg: ClusterConfig,
    s_hat: Optional[float] = None,
) -> PlanDecision:
    """Replace each PS above the utilisation threshold with a bigger pod.

    ``s_hat`` is the per-worker PS demand measured while sampling; it defaults
    to the current used PS CPU per worker.
    """
    if not stats.ps_used_cpu:
        return _no_change(PlanStage.ADJUST, current, "no PS stats")
    total = stats.s_total_used
    if s_hat is None:
        s_hat = total / max(1, n_w)
    alloc = stats.ps_alloc_cpu or [s.cpu_cores for s in current.ps_specs()]
    overrides = dict(current.per_node_overrides)
    changed: List[str] = []
    for j, (used, cpu) in enumerate(zip(stats.ps_used_cpu, alloc)):
        if used / cpu <= cfg.cpu_util_threshold:
            continue
        new_cpu = hot_ps_cpu(used, total, s_hat, n_w, cfg)
        if new_cpu <= cpu:
            continue
        key = f"ps-{j}"
        overrides[key] = current.ps_spec(j).model_copy(update={"cpu_cores": new_cpu})
        changed.append(f"{key}:{cpu}->{new_cpu}")
    if not changed:
        return _no_change(PlanStage.ADJUST, current, "hot PS already large enough")
    plan = current.model_copy(update={"per_node_overrides": overrides})
    return PlanDecision(stage=PlanStage.ADJUST, plan=plan,
                        reason=DecisionReason.HOT_PS_REPLACE, detail=", ".join(changed))


def raise_ps_cpu(
    stats: RuntimeStats, current: ResourcePlan, cfg: ClusterConfig, quota: int,
    stage: PlanStage = PlanStage.SAMPLE,
) -> PlanDecision:
    """Grow PS CPU while sampling when it runs above the threshold.

    Doubles per-PS CPU up to C_max, then adds a PS instead.
    """
    util = stats.ps_utilization()
    if not util or max(util) <= cfg.cpu_util_threshold:
        return _no_change(stage, current, "PS CPU below threshold")
    if current.ps.cpu_cores < cfg.c_max:
        new_cpu = min(cfg.c_max, 2 * current.ps.cpu_cores)
        plan = current.model_copy(update={
            "ps": current.ps.model_copy(update={"cpu_cores": new_cpu}), "per_node_overrides": {}})
        detail = f"ps cpu {current.ps.cpu_cores} -> {new_cpu}"
    else:
        plan = current.model_copy(update={"ps_count": current.ps_count + 1})
        detail = f"ps count {current.ps_count} -> {current.ps_count + 1}"
    if plan.quota_cpu() > quota:
        return _no_change(stage, current, "quota leaves no room for more PS CPU")
    return PlanDecision(stage=stage, plan=plan, reason=DecisionReason.PS_CPU_HIGH, detail=detail)


def _ids(stats: RuntimeStats, role: str, n: int) -> List[str]:
    ids = stats.worker_ids if role == "worker" else stats.ps_ids
    return list(ids) if len(ids) == n else [f"{role}-{i}" for i in range(n)]


def _peer_median(values: List[float], i: int) -> float:
    """Median of every value except the i-th, so a pair can still expose one outlier."""
    return statistics.median(values[:i] + values[i + 1:])


def find_worker_stragglers(stats: RuntimeStats, ratio: float) -> List[int]:
    tp = list(stats.worker_throughput)
    if len(tp) < 2:
        return []
    return [i for i, v in enumerate(tp) if v < ratio * _peer_median(tp, i)]


def mitigate_worker_straggler(
    stats: RuntimeStats,
    current: ResourcePlan,
    pcfg: Optional[PlannerConfig] = None,
) -> PlanDecision:
    """Down-weight slow workers; relaunch those that look machine-bound."""
    pcfg = pcfg or PlannerConfig()
    slow = find_worker_stragglers(stats, pcfg.straggler_ratio)
    if not slow:
        return _no_change(PlanStage.ADJUST, current, "no straggling worker")
    ids = _ids(stats, "worker", len(stats.worker_throughput))
    weights = {wid: 1.0 for wid in ids}
    util = stats.worker_utilization()
    med_util = statistics.median(util) if util else 0.0
    migrate: List[str] = []
    for i in slow:
        weights[ids[i]] = pcfg.straggler_ratio
        if util and med_util > 0 and util[i] < pcfg.slow_machine_util_ratio * med_util:
            migrate.append(ids[i])
    detail = "stragglers: " + ", ".join(ids[i] for i in slow)
    return PlanDecision(stage=PlanStage.ADJUST, plan=current, reason=DecisionReason.WORKER_STRAGGLER,
                        detail=detail, weights=weights, migrate=migrate)


def find_ps_stragglers(stats: RuntimeStats, ratio: float) -> List[int]:
    """PS whose update time is far above the median without higher load."""
    times = list(stats.ps_update_time)
    if len(times) < 2:
        return []
    util = stats.ps_utilization() or [0.0] * len(times)
    out = []
    for j, t in enumerate(times):
        med = _peer_median(times, j)
        if med > 0 and t * ratio >= med and util[j] <= _peer_median(util, j) + 1e-9:
            out.append(j)
    return out


def migrate_ps_straggler(
    stats: RuntimeStats,
    current: ResourcePlan,
    pcfg: Optional[PlannerConfig] = None,
) -> PlanDecision:
    pcfg = pcfg or PlannerConfig()
    slow = find_ps_stragglers(stats, pcfg.straggler_ratio)
    if not slow:
        return _no_change(PlanStage.ADJUST, current, "no straggling PS")
    ids = _ids(stats, "ps", len(stats.ps_update_time))
    migrate = [ids[j] for j in slow]
    return PlanDecision(stage=PlanStage.ADJUST, plan=current, reason=DecisionReason.PS_STRAGGLER,
                        detail="slow PS: " + ", ".join(migrate), migrate=migrate)

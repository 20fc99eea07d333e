"""Optimisation service: administrators raise events, optimizers route them to
planner algorithms, and decisions flow back to the job's coordinator.

The service boundary is message based (:meth:`BrainService.handle_message`
takes and returns JSON text), so the brain can run in-process or as a
separate process without changing callers.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, TextIO

from pydantic import Field

from . import planner
from .model import ClusterConfig, FrozenModel, JobSpec, ResourcePlan, Role, RuntimeStats
from .planner import (DecisionReason, HistoryRecord, PlanDecision, PlannerConfig, PlanStage)

logger = logging.getLogger(__name__)


class EventRegression(Exception):
    pass


class EventKind(str, Enum):
    JOB_CREATED = "JOB_CREATED"
    SAMPLE_WINDOW_DONE = "SAMPLE_WINDOW_DONE"
    PERF_ISSUE = "PERF_ISSUE"
    NODE_OOM = "NODE_OOM"
    NODE_FAILED = "NODE_FAILED"
    PERIODIC_CHECK = "PERIODIC_CHECK"


class FailureRecord(FrozenModel):
    node_id: str
    role: Role
    reason: str = ""


class OptimizationEvent(FrozenModel):
    job_id: str
    kind: EventKind
    timestamp: float
    stats: Optional[RuntimeStats] = None
    failure: Optional[FailureRecord] = None
    job: Optional[JobSpec] = None


class Diagnosis(str, Enum):
    IDLE_PS = "IDLE_PS"
    HOT_PS = "HOT_PS"
    WORKER_STRAGGLER = "WORKER_STRAGGLER"
    PS_STRAGGLER = "PS_STRAGGLER"
    HEALTHY = "HEALTHY"


class BrainConfig(FrozenModel):
    sample_steps: int = Field(default=100, ge=1)
    sample_seconds: float = Field(default=60.0, gt=0.0)
    min_adjust_interval_s: float = Field(default=60.0, ge=0.0)
    idle_threshold: float = Field(default=0.4, gt=0.0, le=1.0)
    hot_threshold: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    skew_ratio: float = Field(default=2.0, ge=1.0)
    worker_busy_threshold: float = Field(default=0.7, ge=0.0, le=1.0)
    perf_drop: float = Field(default=0.2, gt=0.0, lt=1.0)
    history_len: int = Field(default=16, ge=1)
    planner: PlannerConfig = Field(default_factory=PlannerConfig)


@dataclass
class JobTracker:
    job: JobSpec
    cluster: ClusterConfig
    stage: PlanStage = PlanStage.SAMPLE
    current_plan: Optional[ResourcePlan] = None
    stats_history: Deque[RuntimeStats] = field(default_factory=lambda: deque(maxlen=16))
    last_adjust_time: float = -math.inf
    last_event_time: float = -math.inf
    sampled_s_hat: Optional[float] = None
    history: Dict[str, HistoryRecord] = field(default_factory=dict)
    done: bool = False

    @property
    def job_id(self) -> str:
        return self.job.job_id

    def advance(self, stage: PlanStage) -> None:
        if stage.order < self.stage.order:
            raise ValueError(f"stage regression {self.stage} -> {stage}")
        self.stage = stage


def sample_window_done(tracker: JobTracker, current_step: int, elapsed_s: float,
                       cfg: BrainConfig) -> bool:
    """True once sampling has seen enough steps or enough time."""
    return current_step >= cfg.sample_steps or elapsed_s >= cfg.sample_seconds


def diagnose(stats_history: List[RuntimeStats], cfg: BrainConfig,
             cluster: Optional[ClusterConfig] = None) -> Diagnosis:
    """Root-cause the latest window.

    Stragglers are checked first because a slow node distorts usage figures;
    usage relative to allocation separates a slow machine from a loaded one.
    """
    if not stats_history:
        raise ValueError("diagnose needs at least one stats window")
    stats = stats_history[-1]
    hot = cfg.hot_threshold or (cluster.cpu_util_threshold if cluster else 0.9)
    pc = cfg.planner
    if planner.find_worker_stragglers(stats, pc.straggler_ratio):
        return Diagnosis.WORKER_STRAGGLER
    if planner.find_ps_stragglers(stats, pc.straggler_ratio):
        return Diagnosis.PS_STRAGGLER
    util = stats.ps_utilization()
    if util:
        mean_used = stats.s_total_used / len(stats.ps_used_cpu)
        if max(util) > hot and mean_used > 0 and stats.s_hot / mean_used > cfg.skew_ratio:
            return Diagnosis.HOT_PS
        agg = stats.s_total_used / sum(stats.ps_alloc_cpu)
        w_util = stats.worker_utilization()
        busy = (statistics.mean(w_util) >= cfg.worker_busy_threshold) if w_util else True
        if agg < cfg.idle_threshold and busy:
            return Diagnosis.IDLE_PS
    return Diagnosis.HEALTHY


# -- algorithm registry ------------------------------------------------------------

Algorithm = Callable[[JobTracker, OptimizationEvent, BrainConfig], PlanDecision]
ALGORITHMS: Dict[str, Algorithm] = {}


def register_algorithm(name: str) -> Callable[[Algorithm], Algorithm]:
    def deco(fn: Algorithm) -> Algorithm:
        ALGORITHMS[name] = fn
        return fn
    return deco


EVENT_ROUTES: Dict[EventKind, str] = {
    EventKind.JOB_CREATED: "initial_plan",
    EventKind.SAMPLE_WINDOW_DONE: "optimize_plan",
    EventKind.NODE_OOM: "react_to_oom",
}

DIAGNOSIS_ROUTES: Dict[Diagnosis, str] = {
    Diagnosis.IDLE_PS: "adjust_idle_ps",
    Diagnosis.HOT_PS: "adjust_hot_ps",
    Diagnosis.WORKER_STRAGGLER: "mitigate_worker_straggler",
    Diagnosis.PS_STRAGGLER: "migrate_ps_straggler",
}


def _require_stats(ev: OptimizationEvent) -> RuntimeStats:
    if ev.stats is None:
        raise planner.PlannerError("insufficient samples")
    return ev.stats


@register_algorithm("initial_plan")
def _alg_initial(tr: JobTracker, ev: OptimizationEvent, cfg: BrainConfig) -> PlanDecision:
    return planner.initial_plan(tr.job, tr.cluster, tr.history)


@register_algorithm("optimize_plan")
def _alg_optimize(tr: JobTracker, ev: OptimizationEvent, cfg: BrainConfig) -> PlanDecision:
    stats = _require_stats(ev)
    tr.sampled_s_hat = planner.sampled_s_hat(stats)
    return planner.optimize_plan(tr.job_id, stats, tr.job.quota_cpu, tr.cluster,
                                 current=tr.current_plan, pcfg=cfg.planner)


@register_algorithm("react_to_oom")
def _alg_oom(tr: JobTracker, ev: OptimizationEvent, cfg: BrainConfig) -> PlanDecision:
    if ev.failure is None or tr.current_plan is None:
        raise planner.PlannerError("OOM event without failure record or plan")
    return planner.react_to_oom(ev.failure.role, tr.current_plan, tr.cluster,
                                tr.job.quota_cpu, tr.stage)


@register_algorithm("raise_ps_cpu")
def _alg_ps_high(tr: JobTracker, ev: OptimizationEvent, cfg: BrainConfig) -> PlanDecision:
    return planner.raise_ps_cpu(_require_stats(ev), tr.current_plan, tr.cluster,
                                tr.job.quota_cpu, tr.stage)


@register_algorithm("adjust_idle_ps")
def _alg_idle(tr: JobTracker, ev: OptimizationEvent, cfg: BrainConfig) -> PlanDecision:
    return planner.adjust_idle_ps(_require_stats(ev), tr.current_plan, tr.cluster,
                                  quota=tr.job.quota_cpu, pcfg=cfg.planner)


@register_algorithm("adjust_hot_ps")
def _alg_hot(tr: JobTracker, ev: OptimizationEvent, cfg: BrainConfig) -> PlanDecision:
    stats = _require_stats(ev)
    return planner.adjust_hot_ps(stats, tr.current_plan, stats.n_workers, tr.cluster,
                                 s_hat=tr.sampled_s_hat)


@register_algorithm("mitigate_worker_straggler")
def _alg_wstrag(tr: JobTracker, ev: OptimizationEvent, cfg: BrainConfig) -> PlanDecision:
    return planner.mitigate_worker_straggler(_require_stats(ev), tr.current_plan, cfg.planner)


@register_algorithm("migrate_ps_straggler")
def _alg_psstrag(tr: JobTracker, ev: OptimizationEvent, cfg: BrainConfig) -> PlanDecision:
    return planner.migrate_ps_straggler(_require_stats(ev), tr.current_plan, cfg.planner)


def _reflects_plan(stats: RuntimeStats, plan: ResourcePlan) -> bool:
    return stats.n_workers == plan.worker_count and len(stats.ps_used_cpu) == plan.ps_count


def _finish(tr: JobTracker, ev: OptimizationEvent, d: PlanDecision,
            gated: bool) -> List[PlanDecision]:
    if not d.is_change:
        logger.debug("job %s: suppressed NO_CHANGE (%s)", tr.job_id, d.detail)
        return []
    tr.current_plan = d.plan
    if gated:
        tr.last_adjust_time = ev.timestamp
    return [d]


def on_event(tr: JobTracker, ev: OptimizationEvent, cfg: BrainConfig) -> List[PlanDecision]:
    """Route one event to the matching algorithm; NO_CHANGE results are dropped."""
    if ev.job_id != tr.job_id:
        raise ValueError(f"event for {ev.job_id} sent to tracker of {tr.job_id}")
    if ev.timestamp < tr.last_event_time:
        raise EventRegression(
            f"event regression: {ev.timestamp} < last {tr.last_event_time} for {tr.job_id}")
    tr.last_event_time = ev.timestamp
    if tr.done:
        return []
    if ev.stats is not None:
        tr.stats_history.append(ev.stats)
    kind = ev.kind
    if kind is EventKind.NODE_FAILED:
        return []
    if kind is EventKind.JOB_CREATED:
        d = ALGORITHMS[EVENT_ROUTES[kind]](tr, ev, cfg)
        return _finish(tr, ev, d, gated=False)
    if kind is EventKind.NODE_OOM:
        d = ALGORITHMS[EVENT_ROUTES[kind]](tr, ev, cfg)
        return _finish(tr, ev, d, gated=False)
    if kind is EventKind.SAMPLE_WINDOW_DONE:
        if tr.stage is not PlanStage.SAMPLE:
            return []
        d = ALGORITHMS[EVENT_ROUTES[kind]](tr, ev, cfg)
        tr.advance(PlanStage.OPTIMIZE)
        tr.last_adjust_time = ev.timestamp
        return _finish(tr, ev, d, gated=True)
    # PERIODIC_CHECK and PERF_ISSUE
    stats = ev.stats
    if stats is None or tr.current_plan is None:
        return []
    if ev.timestamp - tr.last_adjust_time < cfg.min_adjust_interval_s:
        return []
    if tr.stage is PlanStage.SAMPLE:
        d = ALGORITHMS["raise_ps_cpu"](tr, ev, cfg)
        return _finish(tr, ev, d, gated=True)
    if not _reflects_plan(stats, tr.current_plan):
        return []
    if tr.stage is PlanStage.OPTIMIZE:
        tr.advance(PlanStage.ADJUST)
    diagnosis = diagnose(list(tr.stats_history), cfg, tr.cluster)
    route = DIAGNOSIS_ROUTES.get(diagnosis)
    if route is None:
        return []
    d = ALGORITHMS[route](tr, ev, cfg)
    return _finish(tr, ev, d, gated=True)


class Administrator:
    """Watches one job's stats stream and raises optimisation events."""

    def __init__(self, job_id: str, cfg: BrainConfig):
        self.job_id = job_id
        self.cfg = cfg
        self._throughputs: Deque[float] = deque(maxlen=3)

    def observe(self, stats: RuntimeStats, stage: PlanStage, steps_since_start: int,
                elapsed_since_start: float, tracker: Optional[JobTracker] = None) -> List[OptimizationEvent]:
        ts = stats.timestamp
        if stage is PlanStage.SAMPLE and tracker is not None and sample_window_done(
                tracker, steps_since_start, elapsed_since_start, self.cfg):
            return [OptimizationEvent(job_id=self.job_id, kind=EventKind.SAMPLE_WINDOW_DONE,
                                      timestamp=ts, stats=stats)]
        kind = EventKind.PERIODIC_CHECK
        prev = list(self._throughputs)[-2:]
        if len(prev) == 2 and stats.throughput < (1 - self.cfg.perf_drop) * statistics.mean(prev):
            kind = EventKind.PERF_ISSUE
        self._throughputs.append(stats.throughput)
        return [OptimizationEvent(job_id=self.job_id, kind=kind, timestamp=ts, stats=stats)]

    def reset(self) -> None:
        self._throughputs.clear()


class BrainService:
    """Hosts one tracker per job and processes their events serially per job."""

    def __init__(self, cluster: ClusterConfig, cfg: Optional[BrainConfig] = None,
                 history: Optional[Dict[str, HistoryRecord]] = None,
                 audit: Optional[TextIO] = None):
        self.cluster = cluster
        self.cfg = cfg or BrainConfig()
        self.history = dict(history or {})
        self.trackers: Dict[str, JobTracker] = {}
        self.audit_log: List[Dict[str, object]] = []
        self._audit_fh = audit
        self._locks: Dict[str, threading.Lock] = {}
        self._global = threading.Lock()
        self._seq = 0

    def _lock_for(self, job_id: str) -> threading.Lock:
        with self._global:
            return self._locks.setdefault(job_id, threading.Lock())

    def handle(self, ev: OptimizationEvent) -> List[PlanDecision]:
        with self._lock_for(ev.job_id):
            tr = self.trackers.get(ev.job_id)
            if tr is None:
                if ev.kind is not EventKind.JOB_CREATED or ev.job is None:
                    logger.info("dropping %s for unknown job %s", ev.kind.value, ev.job_id)
                    return []
                tr = JobTracker(job=ev.job, cluster=self.cluster, history=self.history,
                                stats_history=deque(maxlen=self.cfg.history_len))
                self.trackers[ev.job_id] = tr
            decisions = on_event(tr, ev, self.cfg)
            self._audit(ev, decisions)
            return decisions

    def complete_job(self, job_id: str) -> None:
        with self._lock_for(job_id):
            tr = self.trackers.pop(job_id, None)
            if tr is not None:
                tr.done = True

    def tracker(self, job_id: str) -> Optional[JobTracker]:
        return self.trackers.get(job_id)

    def _audit(self, ev: OptimizationEvent, decisions: List[PlanDecision]) -> None:
        with self._global:
            self._seq += 1
            record = {
                "seq": self._seq,
                "event": {"job_id": ev.job_id, "kind": ev.kind.value, "timestamp": ev.timestamp},
                "decisions": [d.model_dump(mode="json") for d in decisions],
            }
            if decisions or ev.kind is not EventKind.PERIODIC_CHECK:
                self.audit_log.append(record)
                if self._audit_fh is not None:
                    self._audit_fh.write(json.dumps(record, sort_keys=True) + "\n")

    def handle_message(self, text: str) -> str:
        """JSON-in/JSON-out entry point used across the service boundary."""
        ev = OptimizationEvent.model_validate_json(text)
        decisions = self.handle(ev)
        return json.dumps([d.model_dump(mode="json") for d in decisions], sort_keys=True)


def decode_decisions(text: str) -> List[PlanDecision]:
    return [PlanDecision.model_validate(d) for d in json.loads(text)]


# re-export for callers that only import brain
__all__ = [
    "Administrator", "BrainConfig", "BrainService", "DecisionReason", "Diagnosis", "EventKind",
    "EventRegression", "FailureRecord", "JobTracker", "OptimizationEvent", "ALGORITHMS",
    "register_algorithm", "diagnose", "on_event", "sample_window_done", "decode_decisions",
]

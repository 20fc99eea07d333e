"""Resource-management policies driven by the simulator.

``DLRoverPolicy`` talks to a :class:`~elasticplan.brain.BrainService` through
its JSON message interface. The baselines keep their own simple state.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Any, Dict, List, Optional

from ..brain import (Administrator, BrainService, EventKind, FailureRecord, OptimizationEvent,
                     decode_decisions)
from ..model import JobMode, ResourcePlan, RuntimeStats
from ..planner import PlanDecision
from .scenario import PolicyKind, ScalerConfig

if TYPE_CHECKING:
    from .engine import Mark, Pod, PodPhase, Simulation

logger = logging.getLogger(__name__)

DLROVER_WINDOW_S = 30.0
BASELINE_WINDOW_S = 60.0


class Policy:
    """Hooks called by the simulator. Subclasses override what they need."""

    fault_tolerant = True
    handles_oom = True
    static_partition = False

    def __init__(self) -> None:
        self.decisions: List[Dict[str, Any]] = []

    def on_start(self, sim: "Simulation") -> None:
        raise NotImplementedError

    def on_tick(self, sim: "Simulation", stats: RuntimeStats) -> None:
        pass

    def on_pod_failed(self, sim: "Simulation", pod: "Pod", phase: "PodPhase") -> None:
        pass

    def on_complete(self, sim: "Simulation") -> None:
        pass

    def record(self, sim: "Simulation", reason: str, plan: ResourcePlan, detail: str = "") -> None:
        self.decisions.append({"t": sim.now, "reason": reason, "plan": plan.describe(),
                               "detail": detail})


class StaticPolicy(Policy):
    """Fixed plan, fixed data partition and no recovery of any kind."""

    fault_tolerant = False
    handles_oom = False
    static_partition = True

    def on_start(self, sim: "Simulation") -> None:
        self.record(sim, "STATIC", sim.sc.static_plan)
        sim.apply_plan(sim.sc.static_plan, "STATIC")


class _StableWindow:
    """Stats window that restarts whenever the cluster leaves steady state."""

    def __init__(self) -> None:
        self.mark: Optional["Mark"] = None

    def poll(self, sim: "Simulation") -> Optional[float]:
        """Return the window length so far, or None if a new window was opened."""
        if sim.stable_since is None or sim.training_start is None:
            self.mark = None
            return None
        if self.mark is None or self.mark.time < sim.stable_since:
            self.mark = sim.capture_mark()
            return None
        return sim.now - self.mark.time

    def take(self, sim: "Simulation", restart: bool = True) -> RuntimeStats:
        stats = sim.stats_since(self.mark)
        if restart:
            self.mark = sim.capture_mark()
        return stats


class DLRoverPolicy(Policy):
    """Sample, optimise, then keep adjusting from diagnosed runtime stats."""

    def __init__(self, sim: "Simulation"):
        super().__init__()
        self.brain = BrainService(sim.cfg, sim.sc.brain)
        self.admin = Administrator(sim.job.job_id, sim.sc.brain)
        self.window = _StableWindow()
        self.elastic = sim.job.mode is JobMode.PS_ASYNC

    def _send(self, sim: "Simulation", ev: OptimizationEvent) -> None:
        reply = self.brain.handle_message(ev.model_dump_json())
        for d in decode_decisions(reply):
            self._apply(sim, d)

    def _apply(self, sim: "Simulation", d: PlanDecision) -> None:
        self.record(sim, d.reason.value, d.plan, d.detail)
        if d.weights:
            sim.set_weights(d.weights)
        sim.apply_plan(d.plan, d.reason.value)
        if d.migrate:
            sim.migrate(d.migrate)

    def on_start(self, sim: "Simulation") -> None:
        if not self.elastic:
            # collective jobs keep their plan; only fault tolerance applies
            self.record(sim, "STATIC", sim.sc.static_plan)
            sim.apply_plan(sim.sc.static_plan, "STATIC")
            return
        self._send(sim, OptimizationEvent(job_id=sim.job.job_id, kind=EventKind.JOB_CREATED,
                                          timestamp=sim.now, job=sim.job))

    def on_tick(self, sim: "Simulation", stats: RuntimeStats) -> None:
        if not self.elastic:
            return
        length = self.window.poll(sim)
        if length is None:
            return
        tracker = self.brain.tracker(sim.job.job_id)
        if tracker is None:
            return
        sampling = tracker.stage.value == "SAMPLE"
        if not sampling and length < DLROVER_WINDOW_S - 1e-9:
            return
        window = self.window.take(sim, restart=not sampling)
        steps = window.window_end_step - window.window_start_step
        events = self.admin.observe(window, tracker.stage, steps, length, tracker)
        for ev in events:
            if ev.kind is EventKind.SAMPLE_WINDOW_DONE:
                self.window.mark = sim.capture_mark()
            self._send(sim, ev)
            if sim.status != "RUNNING":
                return

    def on_pod_failed(self, sim: "Simulation", pod: "Pod", phase: "PodPhase") -> None:
        if not self.elastic:
            return
        kind = EventKind.NODE_OOM if phase.value == "FAILED_OOM" else EventKind.NODE_FAILED
        failure = FailureRecord(node_id=pod.pod_id, role=pod.role, reason=phase.value)
        self._send(sim, OptimizationEvent(job_id=sim.job.job_id, kind=kind, timestamp=sim.now,
                                          failure=failure))

    def on_complete(self, sim: "Simulation") -> None:
        self.brain.complete_job(sim.job.job_id)


class _ScalerPolicy(Policy):
    """Shared loop of the baselines: grow the plan every interval while it pays off."""

    handles_oom = False

    def __init__(self, sim: "Simulation", cfg: Optional[ScalerConfig]):
        super().__init__()
        self.cfg = cfg or ScalerConfig(initial=sim.sc.static_plan)
        self.window = _StableWindow()
        self.prev: Optional[tuple] = None
        self.frozen = False
        self.last_change = 0.0

    def on_start(self, sim: "Simulation") -> None:
        self.record(sim, "INITIAL", self.cfg.initial)
        sim.apply_plan(self.cfg.initial, "INITIAL")

    def on_tick(self, sim: "Simulation", stats: RuntimeStats) -> None:
        if self.frozen:
            return
        length = self.window.poll(sim)
        if length is None or length < BASELINE_WINDOW_S - 1e-9:
            return
        if sim.now - self.last_change < self.cfg.interval_s:
            return
        window = self.window.take(sim)
        plan = sim.plan
        n = window.n_workers
        thr = window.throughput
        if self.prev is not None and not self.keep_growing(self.prev, (n, thr)):
            self.frozen = True
            self.record(sim, "STOP", plan, f"throughput {thr:.4f}")
            return
        nxt = self.grow(plan, sim.job.quota_cpu)
        if nxt is None:
            self.frozen = True
            self.record(sim, "QUOTA", plan)
            return
        self.prev = (n, thr)
        self.last_change = sim.now
        self.record(sim, "GROW", nxt, f"throughput {thr:.4f}")
        sim.apply_plan(nxt, "GROW")

    def keep_growing(self, prev: tuple, cur: tuple) -> bool:
        raise NotImplementedError

    def grow(self, plan: ResourcePlan, quota: int) -> Optional[ResourcePlan]:
        raise NotImplementedError


class AutoscalePolicy(_ScalerPolicy):
    """Worker-only auto-scaler: add workers while scaling efficiency stays high."""

    def keep_growing(self, prev: tuple, cur: tuple) -> bool:
        (n0, t0), (n1, t1) = prev, cur
        if n1 <= n0 or t0 <= 0:
            return False
        efficiency = (t1 - t0) / ((n1 - n0) * t0 / n0)
        return efficiency > self.cfg.efficiency_threshold

    def grow(self, plan: ResourcePlan, quota: int) -> Optional[ResourcePlan]:
        room = (quota - plan.quota_cpu()) // plan.worker.cpu_cores
        add = min(self.cfg.worker_step, room)
        if add < 1:
            return None
        return plan.model_copy(update={"worker_count": plan.worker_count + add})


class OptimusPolicy(_ScalerPolicy):
    """Fixed-increment scaler: add PS and workers while the relative gain is large enough."""

    def keep_growing(self, prev: tuple, cur: tuple) -> bool:
        t0, t1 = prev[1], cur[1]
        return t0 > 0 and (t1 - t0) / t0 > self.cfg.min_gain

    def grow(self, plan: ResourcePlan, quota: int) -> Optional[ResourcePlan]:
        room = quota - plan.quota_cpu()
        add_ps = self.cfg.ps_step
        add_w = self.cfg.worker_step
        while add_ps * plan.ps.cpu_cores + add_w * plan.worker.cpu_cores > room:
            if add_w > 0:
                add_w -= 1
            elif add_ps > 0:
                add_ps -= 1
            else:
                break
        if add_ps + add_w < 1:
            return None
        return plan.model_copy(update={"worker_count": plan.worker_count + add_w,
                                       "ps_count": plan.ps_count + add_ps})


def make_policy(kind: PolicyKind, sim: "Simulation") -> Policy:
    if kind is PolicyKind.STATIC:
        return StaticPolicy()
    if kind is PolicyKind.DLROVER:
        return DLRoverPolicy(sim)
    if kind is PolicyKind.AUTOSCALE:
        return AutoscalePolicy(sim, sim.sc.autoscale)
    if kind is PolicyKind.OPTIMUS:
        return OptimusPolicy(sim, sim.sc.optimus)
    raise ValueError(f"unknown policy {kind}")

"""Deterministic discrete-event simulator of one training job on a cluster.

Workers progress at fluid rates derived from the throughput model: a worker
holding a shard consumes samples at ``B / step_time`` until the shard ends,
so events are needed only at shard boundaries and topology changes. Stale
shard-completion events are invalidated with a per-worker generation counter.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Set, Tuple

import numpy as np

from .. import coord
from ..coord import (DirectiveKind, ParamPartition, PsScalePhase, PsScaleState, ScaleEvent,
                     ScaleEventKind, WorldEvent, WorldSpec)
from ..model import ClusterConfig, JobMode, NodeSpec, ResourcePlan, Role, RuntimeStats
from ..perfmodel import compute_time, ps_update_times
from ..planner import PlannerError
from ..sharding import (DatasetShardManager, EpochFailed, Outcome, Shard, ShardError, Signal,
                        StaticPartitionManager, batch_allotment)
from .scenario import FaultEntry, FaultKind, PolicyKind, Scenario

logger = logging.getLogger(__name__)


class SimulationError(Exception):
    """Raised on deadlock or an internal invariant violation."""

    def __init__(self, message: str, state: Optional[Dict[str, Any]] = None):
        self.state = state or {}
        super().__init__(message if not state else f"{message}; state={state}")


class PodPhase(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    FAILED_OOM = "FAILED_OOM"
    PREEMPTED = "PREEMPTED"
    RELEASED = "RELEASED"


_ENDED = (PodPhase.FAILED_OOM, PodPhase.PREEMPTED, PodPhase.RELEASED)


def pending_time(spec: NodeSpec, cfg: ClusterConfig) -> float:
    """Pod pending time grows with requested CPU."""
    return cfg.pending_base_s + cfg.pending_per_cpu_s * spec.cpu_cores


@dataclass
class Pod:
    pod_id: str
    role: Role
    spec: NodeSpec
    created_at: float
    index: int = -1
    phase: PodPhase = PodPhase.PENDING
    machine_speed: float = 1.0
    started_at: Optional[float] = None
    ready_at: Optional[float] = None
    ended_at: Optional[float] = None
    mem_demand: float = 0.0
    retiring: bool = False
    usage: float = 0.0
    ready_integral: float = 0.0
    _integral: float = 0.0
    _t: float = 0.0

    @property
    def ready(self) -> bool:
        return self.phase is PodPhase.RUNNING and self.ready_at is not None

    @property
    def alive(self) -> bool:
        return self.phase not in _ENDED

    def set_usage(self, t: float, usage: float) -> None:
        self._integral += self.usage * (t - self._t)
        self._t = t
        self.usage = usage

    def integral(self, t: float) -> float:
        return self._integral + self.usage * (t - self._t)


@dataclass
class WorkerRun:
    pod: Pod
    joined_at: float
    t: float
    shard: Optional[Shard] = None
    remaining: float = 0.0
    rate: float = 0.0
    samples: float = 0.0
    gen: int = 0
    waiting: bool = False

    @property
    def pod_id(self) -> str:
        return self.pod.pod_id

    def sync(self, now: float) -> None:
        if self.rate > 0:
            done = self.rate * (now - self.t)
            self.remaining -= done
            self.samples += done
        self.t = now


@dataclass
class Mark:
    time: float
    samples: float
    pods: Dict[str, float]
    workers: Dict[str, float]


@dataclass
class Rebuild:
    """PS group (re)formation: initial start, failure recovery or PS OOM."""

    kind: str
    target: List[NodeSpec]
    slots: Dict[int, str] = field(default_factory=dict)
    pending: Set[str] = field(default_factory=set)
    failed_step: int = 0
    restoring: bool = False


class Simulation:
    """One run of one scenario. Call :meth:`run` once."""

    def __init__(self, scenario: Scenario, seed: Optional[int] = None,
                 policy: Optional[Any] = None, steady: bool = False):
        self.sc = scenario
        self.job = scenario.job
        self.cfg = scenario.cluster
        self.settings = scenario.sim
        self.seed = scenario.seed if seed is None else seed
        self.rng = np.random.default_rng(self.seed)
        self.ps_mode = self.job.mode is JobMode.PS_ASYNC
        self.steady = steady
        self.now = 0.0
        self._heap: List[Tuple[float, int, str, Any]] = []
        self._seq = 0
        self._counters: Dict[str, int] = {}
        self.pods: Dict[str, Pod] = {}
        self.workers: Dict[str, WorkerRun] = {}
        self.deferred: List[str] = []
        self.waiters: List[str] = []
        self.ps_layout: List[str] = []
        placement_seed = int(self.rng.integers(0, 2**31 - 1))
        self.placement = scenario.placement.resolve(placement_seed)
        self.partition = ParamPartition(1, (1.0,), self.job.model_memory_mb)
        self.scale = PsScaleState()
        self._scale_layout: List[str] = []
        self._scale_partition: Optional[ParamPartition] = None
        self._ps_change_pending = False
        self._forced_ps: Set[int] = set()
        self.rebuild: Optional[Rebuild] = None
        self._rebuild_token = 0
        self.world = WorldSpec()
        self._world_token = 0
        self.halt_reason: Optional[str] = None
        self._halt_start = 0.0
        self.halts: List[Dict[str, Any]] = []
        self.cluster_ready = False
        self.training_start: Optional[float] = None
        self.training_mark: Optional[Mark] = None
        self.plan: Optional[ResourcePlan] = None
        self.manager: Any = None
        self.status = "RUNNING"
        self.failure_reason: Optional[str] = None
        self.jct: Optional[float] = None
        self.trace: List[Dict[str, Any]] = []
        self.plan_log: List[Dict[str, Any]] = []
        self.checkpoint: Optional[coord.CheckpointRecord] = None
        self._ckpt_payload: Optional[Tuple[float, str]] = None
        self._ckpt_gen = 0
        self.n_checkpoints = 0
        self.lost_steps = 0
        self.restarted_from_zero = False
        self._gs_base = 0.0
        self._gs_t = 0.0
        self._agg_rate = 0.0
        self._ps_times: List[float] = []
        self._n_computing = 0
        self._initializing: Set[str] = set()
        self.stable_since: Optional[float] = None
        self._epoch_tail = False
        self.series: Dict[str, List[Any]] = {"throughput": [], "workers": [], "ps_util": [],
                                             "ps_cpu": [], "worker_cpu": []}
        self._tick_mark: Optional[Mark] = None
        self._step_faults: List[Tuple[int, int]] = []
        self.worker_mem_demand = float(self.job.worker_memory_mb)
        self.ps_param_mem = float(self.job.model_memory_mb)
        self.shard_completions = 0
        self._stop_after_completions: Optional[int] = None
        self.policy = policy

    # -- event plumbing --------------------------------------------------------------

    def schedule(self, t: float, kind: str, payload: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, payload))

    def log(self, kind: str, **detail: Any) -> None:
        entry = {"t": self.now, "kind": kind}
        entry.update(detail)
        self.trace.append(entry)

    def _new_id(self, role: str) -> str:
        n = self._counters.get(role, 0)
        self._counters[role] = n + 1
        return f"{role}-{n}"

    def run(self) -> "Simulation":
        return self.start().run_loop()

    def start(self) -> "Simulation":
        """Set up the run without processing events; drive it with :meth:`run_until`."""
        if self.policy is None:
            from .policies import make_policy
            self.policy = make_policy(self.sc.policy, self)
        for i, entry in enumerate(self.sc.faults):
            if entry.time is not None:
                self.schedule(entry.time, "FAULT", i)
            else:
                self._step_faults.append((entry.step, i))
        self._step_faults.sort()
        if not self.steady:
            self.schedule(self.settings.tick_s, "TICK")
        self._tick_mark = self.capture_mark()
        self.policy.on_start(self)
        self._update_stability()
        return self

    def run_until(self, t: float) -> "Simulation":
        """Process every event up to time ``t`` and leave the clock at ``t``."""
        return self.run_loop(until=t)

    def run_loop(self, until: Optional[float] = None) -> "Simulation":
        handlers: Dict[str, Callable[[Any], None]] = {
            "POD_STARTED": self._h_pod_started, "POD_READY": self._h_pod_ready,
            "SHARD_DONE": self._h_shard_done, "RETRY": self._h_retry, "TICK": self._h_tick,
            "FAULT": self._h_fault, "PHASE": self._h_phase, "CKPT": self._h_ckpt,
            "WORLD_READY": self._h_world_ready,
        }
        while self.status == "RUNNING":
            if not self._heap:
                raise SimulationError("deadlock: no runnable events", self.state_dump())
            if until is not None and self._heap[0][0] > until:
                self.now = max(self.now, until)
                break
            t, _, kind, payload = heapq.heappop(self._heap)
            if t > self.settings.max_time_s:
                self._fail(f"timeout after {self.settings.max_time_s} s")
                break
            self.now = t
            try:
                handlers[kind](payload)
            except (EpochFailed, ShardError) as exc:
                self._fail(f"shard error: {exc}")
            if kind != "SHARD_DONE":
                self._update_stability()
        return self

    def state_dump(self) -> Dict[str, Any]:
        return {
            "time": self.now,
            "pods": {p.pod_id: p.phase.value for p in self.pods.values() if p.alive},
            "workers": {w: (r.shard.shard_id if r.shard else None) for w, r in self.workers.items()},
            "scale_phase": self.scale.phase.value,
            "halt_reason": self.halt_reason,
            "rebuild": self.rebuild.kind if self.rebuild else None,
            "deferred": list(self.deferred),
            "waiters": list(self.waiters),
        }

    # -- job lifecycle ---------------------------------------------------------------

    def _fail(self, reason: str) -> None:
        if self.status != "RUNNING":
            return
        self.status = "FAILED"
        self.failure_reason = reason
        self.log("JOB_FAILED", reason=reason)
        self._end_halt()
        logger.info("job %s failed at %.1f: %s", self.job.job_id, self.now, reason)

    def _complete(self) -> None:
        self.status = "COMPLETED"
        self.jct = self.now
        self._end_halt()
        self.log("JOB_COMPLETED")
        if self.policy is not None:
            self.policy.on_complete(self)

    def global_samples(self, t: Optional[float] = None) -> float:
        t = self.now if t is None else t
        return self._gs_base + self._agg_rate * (t - self._gs_t)

    def global_step(self) -> int:
        return int(self.global_samples() // self.job.batch_size_per_worker + 1e-9)

    def transition_active(self) -> bool:
        return bool(self._initializing or self._epoch_tail or self.scale.phase is not PsScalePhase.STABLE
                    or self.rebuild is not None or self.halt_reason is not None
                    or any(p.retiring and p.alive for p in self.pods.values()))

    def _update_stability(self) -> None:
        if not self.cluster_ready or self.transition_active():
            self.stable_since = None
        elif self.stable_since is None:
            self.stable_since = self.now

    # -- pods ------------------------------------------------------------------------

    def _target_shares(self, n_ps: int) -> Tuple[float, ...]:
        if n_ps == self.partition.n_ps:
            return self.partition.shares
        return coord.repartition(self.partition, n_ps, self.placement).shares

    def launch(self, role: Role, spec: NodeSpec, index: int = -1,
               share: Optional[float] = None) -> Pod:
        pod = Pod(self._new_id(role.value.lower()), role, spec, self.now, index=index, _t=self.now)
        pod.usage = 0.0
        self.pods[pod.pod_id] = pod
        self._initializing.add(pod.pod_id)
        pod.mem_demand = self._mem_demand(pod, share)
        delay = 0.0 if self.steady else pending_time(spec, self.cfg)
        self.schedule(self.now + delay, "POD_STARTED", pod.pod_id)
        self.log("POD_CREATED", pod=pod.pod_id, cpu=spec.cpu_cores, mem=spec.memory_mb,
                 index=index, low_priority=spec.low_priority)
        return pod

    def _mem_demand(self, pod: Pod, share: Optional[float] = None) -> float:
        if pod.role is Role.WORKER:
            return self.worker_mem_demand
        if share is None:
            shares = self.partition.shares
            share = shares[pod.index] if 0 <= pod.index < len(shares) else max(shares)
        return share * self.ps_param_mem + self.settings.ps_memory_overhead_mb

    def init_time(self, pod: Pod) -> float:
        if self.steady:
            return 0.0
        base = self.cfg.worker_init_s if pod.role is Role.WORKER else self.cfg.ps_init_s
        return base + self.job.model_memory_mb / self.cfg.checkpoint_bandwidth_mb_s

    def release(self, pod: Pod) -> None:
        if not pod.alive:
            return
        pod.set_usage(self.now, 0.0)
        pod.phase = PodPhase.RELEASED
        pod.ended_at = self.now
        self._initializing.discard(pod.pod_id)
        self.log("POD_RELEASED", pod=pod.pod_id)
        if pod.role is Role.WORKER:
            self._remove_worker(pod.pod_id, lost=True)

    def _h_pod_started(self, pod_id: str) -> None:
        pod = self.pods[pod_id]
        if pod.phase is not PodPhase.PENDING:
            return
        pod.phase = PodPhase.RUNNING
        pod.started_at = self.now
        pod.set_usage(self.now, self.cfg.baseline_cpu_overhead)
        self.log("POD_STARTED", pod=pod_id)
        self.schedule(self.now + self.init_time(pod), "POD_READY", pod_id)

    def _h_pod_ready(self, pod_id: str) -> None:
        pod = self.pods[pod_id]
        if pod.phase is not PodPhase.RUNNING:
            return
        pod.ready_at = self.now
        pod.ready_integral = pod.integral(self.now)
        self._initializing.discard(pod_id)
        self.log("POD_READY", pod=pod_id)
        if pod.mem_demand > pod.spec.memory_mb:
            self.pod_failed(pod, PodPhase.FAILED_OOM)
            return
        if pod.role is Role.WORKER:
            self._worker_ready(pod)
        else:
            self._ps_ready(pod)

    def pod_failed(self, pod: Pod, phase: PodPhase) -> None:
        if not pod.alive or self.status != "RUNNING":
            return
        pod.set_usage(self.now, 0.0)
        pod.phase = phase
        pod.ended_at = self.now
        self._initializing.discard(pod.pod_id)
        self.log("POD_" + phase.value, pod=pod.pod_id)
        if not self.policy.fault_tolerant or (phase is PodPhase.FAILED_OOM
                                              and not self.policy.handles_oom):
            self._fail(f"{pod.pod_id} {phase.value} without fault tolerance")
            return
        try:
            if pod.role is Role.WORKER:
                self._remove_worker(pod.pod_id, lost=True)
                self._check_retiring()
            else:
                self._ps_lost(pod)
            self.policy.on_pod_failed(self, pod, phase)
            if self.status == "RUNNING":
                self.reconcile()
        except (PlannerError, ShardError) as exc:
            self._fail(f"recovery of {pod.pod_id} failed: {exc}")

    # -- plan application --------------------------------------------------------------

    def apply_plan(self, plan: ResourcePlan, reason: str) -> None:
        self.plan = plan
        self.plan_log.append({"t": self.now, "reason": reason, "plan": plan.model_dump(mode="json")})
        self.log("PLAN", reason=reason, plan=plan.describe())
        self.reconcile()

    def reconcile(self) -> None:
        if self.plan is None or self.status != "RUNNING":
            return
        self._reconcile_workers()
        if self.ps_mode:
            self._reconcile_ps()
        elif not self.cluster_ready:
            self._start_training()

    def live_workers(self) -> List[Pod]:
        return [p for p in self.pods.values() if p.role is Role.WORKER and p.alive and not p.retiring]

    def _reconcile_workers(self) -> None:
        plan = self.plan
        live = self.live_workers()
        keep = [p for p in live if p.spec.cpu_cores == plan.worker.cpu_cores]
        for p in live:
            if p not in keep:
                p.retiring = True
                self.log("POD_RETIRING", pod=p.pod_id)
        need = plan.worker_count - len(keep)
        for k in range(need):
            self.launch(Role.WORKER, plan.worker_spec(len(keep) + k))
        if need < 0:
            # drop pods that are still starting first, then the newest
            order = sorted(keep, key=lambda p: (p.ready, -p.created_at, p.pod_id))
            for p in order[:-need]:
                self.release(p)
            self._recompute()
        self._check_retiring()

    def _check_retiring(self) -> None:
        retiring = [p for p in self.pods.values() if p.role is Role.WORKER and p.alive and p.retiring]
        if not retiring:
            return
        starting = [p for p in self.live_workers() if not p.ready]
        if starting:
            return
        for p in retiring:
            self.release(p)
        self._recompute()

    def migrate(self, pod_ids: List[str]) -> None:
        """Relaunch pods on a fresh machine; the old pod stays until the new one is ready."""
        for pid in pod_ids:
            pod = self.pods.get(pid)
            if pod is None or not pod.alive:
                continue
            self.log("MIGRATE", pod=pid)
            if pod.role is Role.WORKER:
                pod.retiring = True
                self.launch(Role.WORKER, pod.spec)
            elif pid in self.ps_layout:
                self._forced_ps.add(self.ps_layout.index(pid))
        if self.ps_mode:
            self._reconcile_ps()

    def set_weights(self, weights: Dict[str, float]) -> None:
        live = {w: v for w, v in weights.items() if w in self.workers}
        if live and self.manager is not None:
            self.manager.set_weights(live)
            self.log("WEIGHTS", weights=live)

    # -- PS group ----------------------------------------------------------------------

    def _reconcile_ps(self) -> None:
        target = self.plan.ps_specs()
        if not self.cluster_ready and self.rebuild is None:
            self.rebuild = Rebuild("formation", target)
            self._fill_rebuild()
            return
        if self.rebuild is not None:
            if self.rebuild.restoring:
                self._ps_change_pending = True
                return
            self.rebuild.target = target
            self._fill_rebuild()
            return
        if self.scale.phase is not PsScalePhase.STABLE:
            self._ps_change_pending = True
            return
        self._ps_change_pending = False
        layout = self.ps_layout
        new_layout: List[Optional[str]] = []
        launch: List[Tuple[int, NodeSpec]] = []
        for i, spec in enumerate(target):
            if i < len(layout) and i not in self._forced_ps and self.pods[layout[i]].spec == spec:
                new_layout.append(layout[i])
            else:
                new_layout.append(None)
                launch.append((i, spec))
        release = [pid for i, pid in enumerate(layout) if i >= len(target) or new_layout[i] != pid]
        self._forced_ps.clear()
        if not launch and not release:
            return
        new_ids: List[str] = []
        shares = self._target_shares(len(target))
        for i, spec in launch:
            pod = self.launch(Role.PS, spec, index=i, share=shares[i])
            new_layout[i] = pod.pod_id
            new_ids.append(pod.pod_id)
        self._scale_layout = [pid for pid in new_layout if pid is not None]
        self.log("PS_SCALE_REQUEST", launch=new_ids, release=release, n_ps=len(target))
        self._scale_event(ScaleEvent(ScaleEventKind.SCALE_REQUEST, tuple(new_ids), tuple(release),
                                     target_n_ps=len(target)))

    def _scale_event(self, ev: ScaleEvent) -> None:
        before = self.scale.phase
        self.scale, directives = coord.ps_scale(self.scale, ev)
        if self.scale.phase is not before:
            self.log("PS_PHASE", phase=self.scale.phase.value)
        for d in directives:
            self._exec_scale(d)

    def _exec_scale(self, d: coord.Directive) -> None:
        bw = self.cfg.checkpoint_bandwidth_mb_s
        if d.kind is DirectiveKind.LAUNCH_PS:
            return  # pods were created with the request
        if d.kind is DirectiveKind.HALT_WORKERS:
            self._halt("ps_scale")
            self._scale_event(ScaleEvent(ScaleEventKind.HALTED))
        elif d.kind is DirectiveKind.CHECKPOINT:
            self._take_checkpoint()
            dur = coord.checkpoint_seconds(self.job.model_memory_mb, bw)
            self.schedule(self.now + dur, "PHASE", ScaleEventKind.CHECKPOINT_DONE)
        elif d.kind is DirectiveKind.REPARTITION:
            n = int(d.get("n_ps", len(self._scale_layout)))
            self._scale_partition = coord.repartition(self.partition, n, self.placement)
            self.schedule(self.now + self.cfg.repartition_s, "PHASE", ScaleEventKind.REPARTITION_DONE)
        elif d.kind is DirectiveKind.RESTORE:
            dur = coord.restore_seconds(self._scale_partition, bw)
            self.schedule(self.now + dur, "PHASE", ScaleEventKind.RESTORE_DONE)
        elif d.kind is DirectiveKind.RESUME_WORKERS:
            self.ps_layout = list(self._scale_layout)
            self.partition = self._scale_partition
            for j, pid in enumerate(self.ps_layout):
                self.pods[pid].index = j
            self._check_ps_memory()
            if self.status != "RUNNING":
                return
            self._resume()
            self._scale_event(ScaleEvent(ScaleEventKind.RESUMED))
        elif d.kind is DirectiveKind.RELEASE_PS:
            for pid in d.targets:
                self.release(self.pods[pid])
            if self._ps_change_pending and self.scale.phase is PsScalePhase.STABLE:
                self._reconcile_ps()

    def _h_phase(self, kind: Any) -> None:
        if self.status != "RUNNING":
            return
        if isinstance(kind, tuple):
            if self.rebuild is not None and self.rebuild.restoring and kind[1] == self._rebuild_token:
                self._finish_rebuild()
            return
        expected = {ScaleEventKind.CHECKPOINT_DONE: PsScalePhase.CHECKPOINTING,
                    ScaleEventKind.REPARTITION_DONE: PsScalePhase.REPARTITIONING,
                    ScaleEventKind.RESTORE_DONE: PsScalePhase.RESTORING}
        if self.scale.phase is not expected[kind]:
            return  # scale was aborted meanwhile
        self._scale_event(ScaleEvent(kind))
        if kind is ScaleEventKind.RESTORE_DONE and self._ps_change_pending \
                and self.scale.phase is PsScalePhase.STABLE:
            self._reconcile_ps()

    def _ps_ready(self, pod: Pod) -> None:
        rb = self.rebuild
        if rb is not None and pod.pod_id in rb.pending:
            rb.pending.discard(pod.pod_id)
            if not rb.pending:
                self._rebuild_ready()
            return
        if self.scale.phase is PsScalePhase.NEW_PS_PENDING and pod.pod_id in self.scale.waiting:
            self._scale_event(ScaleEvent(ScaleEventKind.PS_READY, (pod.pod_id,)))

    def _fill_rebuild(self) -> None:
        rb = self.rebuild
        for idx in sorted(rb.slots):
            pid = rb.slots[idx]
            if idx >= len(rb.target) or self.pods[pid].spec != rb.target[idx]:
                self.release(self.pods[pid])
                rb.pending.discard(pid)
                del rb.slots[idx]
        for idx, spec in enumerate(rb.target):
            if idx in rb.slots:
                continue
            if idx < len(self.ps_layout):
                old = self.pods[self.ps_layout[idx]]
                if old.alive and old.spec == spec:
                    continue
            pod = self.launch(Role.PS, spec, index=idx, share=self._target_shares(len(rb.target))[idx])
            rb.slots[idx] = pod.pod_id
            if not pod.ready:
                rb.pending.add(pod.pod_id)
        if not rb.pending:
            self._rebuild_ready()

    def _rebuild_ready(self) -> None:
        rb = self.rebuild
        if rb.kind == "formation":
            self._finish_rebuild()
            return
        rb.restoring = True
        n = len(rb.target)
        part = coord.repartition(self.partition, n, self.placement) if n != self.partition.n_ps \
            else self.partition
        dur = coord.restore_seconds(part, self.cfg.checkpoint_bandwidth_mb_s)
        self.log("PS_RESTORE", seconds=dur)
        self._rebuild_token += 1
        self.schedule(self.now + dur, "PHASE", ("REBUILD_RESTORED", self._rebuild_token))

    def _finish_rebuild(self) -> None:
        rb = self.rebuild
        n = len(rb.target)
        layout = []
        for idx in range(n):
            if idx in rb.slots:
                layout.append(rb.slots[idx])
            else:
                layout.append(self.ps_layout[idx])
        for pid in self.ps_layout:
            if pid not in layout:
                self.release(self.pods[pid])
        if n != self.partition.n_ps:
            self.partition = coord.repartition(self.partition, n, self.placement)
        self.ps_layout = layout
        for j, pid in enumerate(layout):
            self.pods[pid].index = j
        self.rebuild = None
        if rb.kind == "formation":
            self._check_ps_memory()
            if self.status == "RUNNING":
                self._start_training()
            return
        self._rollback(rb)
        self._check_ps_memory()
        if self.status != "RUNNING":
            return
        self._resume()
        if self._ps_change_pending:
            self._ps_change_pending = False
            self._reconcile_ps()

    def _ps_lost(self, pod: Pod) -> None:
        pid = pod.pod_id
        if self.rebuild is not None and pid in self.rebuild.slots.values():
            # a replacement died before the group came up: launch another
            for idx, sid in list(self.rebuild.slots.items()):
                if sid == pid:
                    del self.rebuild.slots[idx]
            self.rebuild.pending.discard(pid)
            self.rebuild.restoring = False
            self._rebuild_token += 1
            self._fill_rebuild()
            return
        if self.scale.phase is not PsScalePhase.STABLE:
            active_hit = pid in self.ps_layout
            self.log("PS_SCALE_ABORT", failed=pid)
            self.scale, directives = coord.ps_scale(
                self.scale, ScaleEvent(ScaleEventKind.PS_FAILED, (pid,)))
            for d in directives:
                if d.kind is DirectiveKind.RELEASE_PS:
                    for t in d.targets:
                        self.release(self.pods[t])
            self._ps_change_pending = True
            if not active_hit:
                if self.halt_reason == "ps_scale":
                    self._resume()
                self._ps_change_pending = False
                self._reconcile_ps()
                return
        if pid not in self.ps_layout:
            return
        if self.halt_reason == "ps_scale":
            self._end_halt()
        step = self.global_step()
        plan = coord.ps_failure_recover(self.checkpoint, [pid], step)
        self.log("PS_RECOVERY", failed=pid, resume_step=plan.resume_step,
                 restart_from_zero=plan.restart_from_zero)
        target = self.plan.ps_specs() if self.plan else [self.pods[p].spec for p in self.ps_layout]
        if self.rebuild is None:
            self.rebuild = Rebuild("recovery", target, failed_step=step)
            self._halt("ps_recovery")
        self._fill_rebuild()

    def _rollback(self, rb: Rebuild) -> None:
        for run in self.workers.values():
            run.sync(self.now)
            run.shard = None
            run.remaining = 0.0
        self.waiters.clear()
        if self._ckpt_payload is not None:
            samples, text = self._ckpt_payload
            self.manager.restore(text)
            lost = max(0, rb.failed_step - self.checkpoint.step)
        else:
            samples = 0.0
            self.manager = self._new_manager()
            for w in self.workers:
                self.manager.register(w)
            lost = rb.failed_step
            self.restarted_from_zero = True
        self.lost_steps += lost
        self._rebase(samples)
        self.log("ROLLBACK", to_step=int(samples // self.job.batch_size_per_worker), lost_steps=lost)

    def _check_ps_memory(self) -> None:
        for j, pid in enumerate(self.ps_layout):
            pod = self.pods[pid]
            pod.mem_demand = self._mem_demand(pod, self.partition.shares[j])
            if pod.alive and pod.mem_demand > pod.spec.memory_mb:
                self.pod_failed(pod, PodPhase.FAILED_OOM)
                return

    # -- training --------------------------------------------------------------------

    def _new_manager(self) -> Any:
        shard_size = self.sc.shard_size()
        if self.sc.policy is PolicyKind.STATIC and self.policy.static_partition:
            ids = sorted((p for p in self.pods.values() if p.role is Role.WORKER),
                         key=lambda p: (p.created_at, int(p.pod_id.split("-")[1])))
            ids = [p.pod_id for p in ids][: self.plan.worker_count]
            return StaticPartitionManager(self.job.dataset_size, shard_size, self.job.epochs, ids)
        return DatasetShardManager(self.job.dataset_size, shard_size, self.job.epochs,
                                   rng=self.rng)

    def _start_training(self) -> None:
        self.cluster_ready = True
        self.manager = self._new_manager()
        self.log("CLUSTER_READY", ps=list(self.ps_layout))
        deferred, self.deferred = self.deferred, []
        for pid in deferred:
            if self.pods[pid].ready:
                self._join(self.pods[pid], recompute=False)
        self._recompute()

    def _worker_ready(self, pod: Pod) -> None:
        if not self.cluster_ready or self.halt_reason is not None:
            self.deferred.append(pod.pod_id)
        else:
            self._join(pod)
        self._check_retiring()

    def _join(self, pod: Pod, recompute: bool = True) -> None:
        if self.ps_mode:
            directives = coord.worker_join_ps_mode(self.scale.phase, pod.pod_id, list(self.workers))
            if not directives:
                return
            if directives[0].kind is DirectiveKind.DEFER_WORKER:
                self.deferred.append(pod.pod_id)
                return
        run = WorkerRun(pod, self.now, self.now)
        self.workers[pod.pod_id] = run
        self.manager.register(pod.pod_id)
        self.log("WORKER_JOIN", pod=pod.pod_id)
        if self.training_start is None:
            self.training_start = self.now
            self.training_mark = self.capture_mark()
            self.log("TRAINING_START")
        if not self.ps_mode:
            self._world_change(WorldEvent("join", pod.pod_id, self.now))
        self._assign(run)
        if recompute:
            self._recompute()

    def _remove_worker(self, pod_id: str, lost: bool) -> None:
        if pod_id in self.deferred:
            self.deferred.remove(pod_id)
        run = self.workers.pop(pod_id, None)
        if run is None:
            return
        run.sync(self.now)
        run.rate = 0.0
        run.gen += 1
        if pod_id in self.waiters:
            self.waiters.remove(pod_id)
        recovered = self.manager.on_worker_lost(pod_id)
        self.log("WORKER_LEAVE", pod=pod_id, recovered=recovered)
        if not self.ps_mode:
            self._world_change(WorldEvent("leave", pod_id, self.now))
        self._wake_waiters()
        self._recompute()

    def _assign(self, run: WorkerRun) -> None:
        got = self.manager.acquire(run.pod_id, self.now)
        queues = getattr(self.manager, "queues", None)
        if isinstance(got, Shard):
            run.shard = got
            run.remaining = float(got.size)
            run.waiting = False
            if self._epoch_tail and queues is not None and queues.todo_count > 0:
                self._epoch_tail = False
            return
        run.shard = None
        run.remaining = 0.0
        if queues is not None and queues.todo_count == 0:
            # out of data until the epoch ends: idle workers are not a signal
            self._epoch_tail = True
        if got is Signal.WAIT:
            if not run.waiting:
                run.waiting = True
                self.waiters.append(run.pod_id)
            self.schedule(self.now + self.settings.wait_retry_s, "RETRY", run.pod_id)
        else:
            run.waiting = False

    def _wake_waiters(self) -> bool:
        if not self.waiters or self.halt_reason is not None:
            return False
        woke = False
        for pid in list(self.waiters):
            run = self.workers.get(pid)
            if run is None or not run.waiting:
                continue
            self.waiters.remove(pid)
            run.waiting = False
            self._assign(run)
            woke = woke or run.shard is not None
        return woke

    def _h_retry(self, pod_id: str) -> None:
        run = self.workers.get(pod_id)
        if run is None or not run.waiting or self.halt_reason is not None:
            return
        self.waiters.remove(pod_id)
        run.waiting = False
        self._assign(run)
        if run.shard is not None:
            self._recompute()

    def _h_shard_done(self, payload: Tuple[str, int]) -> None:
        pod_id, gen = payload
        run = self.workers.get(pod_id)
        if run is None or run.gen != gen or run.shard is None:
            return
        if self.halt_reason is not None:
            raise SimulationError("shard completed while workers halted", self.state_dump())
        run.sync(self.now)
        shard = run.shard
        run.shard = None
        self.manager.report(shard, pod_id, Outcome.SUCCESS, self.now)
        self.shard_completions += 1
        if self.manager.finished:
            self._sync_all()
            self._complete()
            return
        before = self._n_computing
        self._assign(run)
        woke = self._wake_waiters()
        if run.shard is not None and not woke and (self._n_computing == before):
            run.remaining = float(run.shard.size)
            self._schedule_worker(run)
        else:
            self._recompute()
        if self._step_faults and self.global_step() >= self._step_faults[0][0]:
            _, idx = self._step_faults.pop(0)
            self._h_fault(idx)
        if self._stop_after_completions is not None and \
                self.shard_completions >= self._stop_after_completions:
            self.status = "MEASURED"

    def _sync_all(self) -> None:
        for run in self.workers.values():
            run.sync(self.now)
        self._rebase(self.global_samples())

    def _rebase(self, samples: float) -> None:
        self._gs_base = samples
        self._gs_t = self.now

    def _schedule_worker(self, run: WorkerRun) -> None:
        run.gen += 1
        if run.rate > 0 and run.shard is not None:
            self.schedule(self.now + max(0.0, run.remaining) / run.rate, "SHARD_DONE",
                          (run.pod_id, run.gen))

    def _halt(self, reason: str) -> None:
        if self.halt_reason is not None:
            return
        self.halt_reason = reason
        self._halt_start = self.now
        self.log("HALT", reason=reason)
        self._recompute()

    def _end_halt(self) -> None:
        if self.halt_reason is None:
            return
        self.halts.append({"start": self._halt_start, "end": self.now, "reason": self.halt_reason})
        self.log("RESUME", reason=self.halt_reason)
        self.halt_reason = None

    def _resume(self) -> None:
        self._end_halt()
        deferred, self.deferred = self.deferred, []
        for pid in deferred:
            pod = self.pods[pid]
            if pod.ready and pod.alive and pid not in self.workers:
                self._join(pod, recompute=False)
        for run in self.workers.values():
            if run.shard is None and not run.waiting:
                self._assign(run)
        self._wake_waiters()
        self._recompute()

    def _recompute(self) -> None:
        """Recompute every worker's rate and every pod's CPU usage."""
        now = self.now
        self._sync_all()
        runs = list(self.workers.values())
        halted = self.halt_reason is not None or not self.cluster_ready or self.status != "RUNNING"
        computing = [r for r in runs if r.shard is not None and not halted]
        self._n_computing = len(computing)
        n = len(computing)
        job, cfg = self.job, self.cfg
        rates: Dict[str, float] = {}
        if n and self.ps_mode:
            ps = [self.pods[p] for p in self.ps_layout]
            times = ps_update_times(job, [p.spec.cpu_cores for p in ps], self.partition.shares, n,
                                    cfg, [p.machine_speed for p in ps])
            self._ps_times = times
            t_up = max(times)
            for r in computing:
                step = job.io_time + compute_time(job, r.pod.spec.cpu_cores, cfg) + t_up
                rates[r.pod_id] = job.batch_size_per_worker * r.pod.machine_speed / step
        elif n:
            order = [w for w in self.world.worker_ids() if w in {r.pod_id for r in computing}]
            n_global = job.global_batch_multiple or n
            order = order[:n_global]
            allot = batch_allotment(n_global, order).per_worker_minibatches if order else {}
            slowest = 0.0
            for r in computing:
                m = allot.get(r.pod_id, 0)
                if m:
                    t = m * (job.io_time + compute_time(job, r.pod.spec.cpu_cores, cfg)) / r.pod.machine_speed
                    slowest = max(slowest, t)
            period = slowest + job.allreduce_latency_s
            for r in computing:
                m = allot.get(r.pod_id, 0)
                rates[r.pod_id] = m * job.batch_size_per_worker / period if m and period > 0 else 0.0
        agg = 0.0
        for r in runs:
            r.rate = rates.get(r.pod_id, 0.0)
            agg += r.rate
            busy = r.rate > 0
            use = min(job.required_worker_cpu, r.pod.spec.cpu_cores) * r.pod.machine_speed if busy \
                else self.cfg.baseline_cpu_overhead
            r.pod.set_usage(now, use)
            self._schedule_worker(r)
        self._agg_rate = agg
        if self.ps_mode:
            for j, pid in enumerate(self.ps_layout):
                pod = self.pods[pid]
                if not pod.alive:
                    continue
                if n:
                    demand = n * self.partition.shares[j] * job.required_ps_cpu_per_worker
                    use = min(demand, pod.spec.cpu_cores) * pod.machine_speed
                else:
                    use = self.cfg.baseline_cpu_overhead if pod.ready else 0.0
                pod.set_usage(now, use)
            self._schedule_checkpoint()

    # -- checkpoints -------------------------------------------------------------------

    def _schedule_checkpoint(self) -> None:
        self._ckpt_gen += 1
        if self._agg_rate <= 0 or self.steady:
            return
        interval = self.settings.checkpoint_interval_steps * self.job.batch_size_per_worker
        nxt = (math.floor(self.global_samples() / interval + 1e-9) + 1) * interval
        t = self._gs_t + (nxt - self._gs_base) / self._agg_rate
        self.schedule(max(t, self.now), "CKPT", self._ckpt_gen)

    def _h_ckpt(self, gen: int) -> None:
        if gen != self._ckpt_gen or self.halt_reason is not None:
            return
        self._take_checkpoint()
        self._schedule_checkpoint()

    def _take_checkpoint(self) -> None:
        if self.manager is None or not hasattr(self.manager, "checkpoint"):
            return
        self.n_checkpoints += 1
        samples = self.global_samples()
        ref = f"ckpt-{self.n_checkpoints}"
        self.checkpoint = coord.CheckpointRecord(self.global_step(), self.now, ref)
        self._ckpt_payload = (samples, self.manager.checkpoint())

    # -- allreduce world ---------------------------------------------------------------

    def _world_change(self, ev: WorldEvent) -> None:
        self.world, directives = coord.world_update(self.world, ev)
        if not directives:
            return
        self.log("WORLD", epoch=self.world.world_epoch, members=self.world.worker_ids())
        if self.world.size == 0:
            return
        rebuild = self.settings.world_rebuild_s
        if rebuild is None:
            rebuild = self.job.model_memory_mb / self.cfg.checkpoint_bandwidth_mb_s
        self._world_token += 1
        if self.halt_reason is None:
            self._halt("world_rebuild")
        if self.halt_reason == "world_rebuild":
            self.schedule(self.now + rebuild, "WORLD_READY", self._world_token)

    def _h_world_ready(self, token: int) -> None:
        if token != self._world_token or self.halt_reason != "world_rebuild":
            return
        self._resume()

    # -- faults ------------------------------------------------------------------------

    def _pick_target(self, entry: FaultEntry) -> Optional[Pod]:
        role, _, sel = entry.target.partition(":")
        if not sel:
            pod = self.pods.get(entry.target)
            return pod if pod is not None and pod.alive else None
        if role == "ps":
            cands = [self.pods[p] for p in self.ps_layout if self.pods[p].alive]
            if sel == "random":
                return cands[int(self.rng.integers(len(cands)))] if cands else None
            idx = int(sel)
            return cands[idx] if idx < len(cands) else None
        cands = sorted((r.pod for r in self.workers.values()),
                       key=lambda p: (p.ready_at, p.created_at, p.pod_id))
        if not cands:
            cands = [p for p in self.live_workers() if p.alive]
        if sel == "random":
            return cands[int(self.rng.integers(len(cands)))] if cands else None
        idx = int(sel)
        return cands[idx] if idx < len(cands) else None

    def _h_fault(self, idx: int) -> None:
        if self.status != "RUNNING":
            return
        entry = self.sc.faults[idx]
        pod = self._pick_target(entry)
        if pod is None:
            self.log("FAULT_SKIPPED", target=entry.target, fault=entry.fault.value)
            return
        self.log("FAULT", pod=pod.pod_id, fault=entry.fault.value, factor=entry.factor)
        if entry.fault is FaultKind.PREEMPT:
            self.pod_failed(pod, PodPhase.PREEMPTED)
        elif entry.fault is FaultKind.SLOW:
            pod.machine_speed = entry.factor
            self._recompute()
        elif entry.fault is FaultKind.OOM:
            if pod.role is Role.WORKER:
                self.worker_mem_demand = float(entry.demand_mb)
            else:
                self.ps_param_mem = float(entry.demand_mb)
            pod.mem_demand = self._mem_demand(pod)
            if pod.ready and pod.mem_demand > pod.spec.memory_mb:
                self.pod_failed(pod, PodPhase.FAILED_OOM)

    # -- stats -------------------------------------------------------------------------

    def capture_mark(self) -> Mark:
        t = self.now
        return Mark(t, self.global_samples(t),
                    {pid: p.integral(t) for pid, p in self.pods.items() if p.alive},
                    {w: r.samples + r.rate * (t - r.t) for w, r in self.workers.items()})

    def stats_since(self, mark: Mark) -> RuntimeStats:
        now = self.now
        B = self.job.batch_size_per_worker
        window = max(now - mark.time, 1e-12)

        def avg_use(pod: Pod) -> float:
            # average over the part of the window in which the pod was ready
            ready_at = pod.ready_at if pod.ready_at is not None else now
            if ready_at > mark.time or pod.pod_id not in mark.pods:
                start, base = ready_at, pod.ready_integral
            else:
                start, base = mark.time, mark.pods[pod.pod_id]
            if now - start <= 1e-12:
                return min(pod.spec.cpu_cores, pod.usage)
            return min(pod.spec.cpu_cores, max(0.0, (pod.integral(now) - base) / (now - start)))

        w_ids, w_used, w_alloc, w_mem, w_tp = [], [], [], [], []
        for wid, run in self.workers.items():
            pod = run.pod
            w_ids.append(wid)
            w_used.append(avg_use(pod))
            w_alloc.append(pod.spec.cpu_cores)
            w_mem.append(min(pod.mem_demand, pod.spec.memory_mb))
            start = max(mark.time, run.joined_at)
            done = run.samples + run.rate * (now - run.t) - mark.workers.get(wid, 0.0)
            w_tp.append(max(0.0, done) / B / max(now - start, 1e-12))
        p_ids, p_used, p_alloc, p_mem = [], [], [], []
        for pid in self.ps_layout:
            pod = self.pods[pid]
            p_ids.append(pid)
            p_used.append(avg_use(pod))
            p_alloc.append(pod.spec.cpu_cores)
            p_mem.append(min(pod.mem_demand, pod.spec.memory_mb))
        samples = self.global_samples(now)
        upd = list(self._ps_times) if len(self._ps_times) == len(p_ids) else [0.0] * len(p_ids)
        return RuntimeStats(
            job_id=self.job.job_id,
            window_start_step=int(mark.samples // B),
            window_end_step=int(samples // B),
            worker_used_cpu=w_used, ps_used_cpu=p_used,
            worker_used_mem=w_mem, ps_used_mem=p_mem,
            throughput=max(0.0, samples - mark.samples) / B / window,
            timestamp=now, window_start_time=mark.time,
            worker_ids=w_ids, ps_ids=p_ids, worker_alloc_cpu=w_alloc, ps_alloc_cpu=p_alloc,
            worker_throughput=w_tp, ps_update_time=upd,
        )

    def _h_tick(self, _: Any) -> None:
        if self.status != "RUNNING":
            return
        self._update_stability()
        stats = self.stats_since(self._tick_mark)
        self._tick_mark = self.capture_mark()
        t = round(self.now, 6)
        self.series["throughput"].append([t, stats.throughput])
        self.series["workers"].append([t, len(self.workers)])
        self.series["ps_util"].append([t, [round(u, 6) for u in stats.ps_utilization()]])
        self.series["ps_cpu"].append([t, sum(stats.ps_alloc_cpu)])
        self.series["worker_cpu"].append([t, sum(stats.worker_alloc_cpu)])
        self.policy.on_tick(self, stats)
        self.schedule(self.now + self.settings.tick_s, "TICK")

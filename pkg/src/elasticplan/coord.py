"""Elasticity state machines for PS scaling, recovery and allreduce membership.

Everything here is a pure transition function returning the next state plus
a list of :class:`Directive` messages; the simulator (or a real controller)
executes the directives and feeds completion events back in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class IllegalTransition(Exception):
    pass


class DirectiveKind(str, Enum):
    LAUNCH_PS = "LAUNCH_PS"
    HALT_WORKERS = "HALT_WORKERS"
    CHECKPOINT = "CHECKPOINT"
    REPARTITION = "REPARTITION"
    RESTORE = "RESTORE"
    RESUME_WORKERS = "RESUME_WORKERS"
    RELEASE_PS = "RELEASE_PS"
    RELAUNCH_PS = "RELAUNCH_PS"
    REGISTER_WORKER = "REGISTER_WORKER"
    DEFER_WORKER = "DEFER_WORKER"
    FAILURE_SIGNAL = "FAILURE_SIGNAL"
    BROADCAST = "BROADCAST"
    RESTART_JOB = "RESTART_JOB"


@dataclass(frozen=True)
class Directive:
    kind: DirectiveKind
    targets: Tuple[str, ...] = ()
    detail: Tuple[Tuple[str, object], ...] = ()

    def get(self, key: str, default: object = None) -> object:
        return dict(self.detail).get(key, default)

    def to_dict(self) -> Dict[str, object]:
        return {"kind": self.kind.value, "targets": list(self.targets), "detail": dict(self.detail)}


def _directive(kind: DirectiveKind, targets: Sequence[str] = (), **detail: object) -> Directive:
    return Directive(kind, tuple(targets), tuple(sorted(detail.items())))


# -- parameter partitions ---------------------------------------------------------------


class PlacementKind(str, Enum):
    EVEN = "EVEN"
    SKEWED = "SKEWED"


@dataclass(frozen=True)
class Placement:
    """How parameters are spread over PS.

    SKEWED draws ``tensors`` lognormal tensor sizes from ``seed`` and places
    them round-robin, the default variable placement of PS frameworks. The
    same seed gives consistent skew for every PS count.
    """

    kind: PlacementKind = PlacementKind.EVEN
    seed: int = 0
    tensors: int = 64
    sigma: float = 1.0

    @classmethod
    def even(cls) -> "Placement":
        return cls(PlacementKind.EVEN)

    @classmethod
    def skewed(cls, seed: int, tensors: int = 64, sigma: float = 1.0) -> "Placement":
        return cls(PlacementKind.SKEWED, seed, tensors, sigma)

    def shares(self, n_ps: int) -> List[float]:
        if n_ps < 1:
            raise ValueError("n_ps must be >= 1")
        if self.kind is PlacementKind.EVEN:
            return [1.0 / n_ps] * n_ps
        sizes = np.random.default_rng(self.seed).lognormal(0.0, self.sigma, self.tensors)
        load = np.zeros(n_ps)
        for i, size in enumerate(sizes):
            load[i % n_ps] += size
        return [float(x) for x in load / load.sum()]


@dataclass(frozen=True)
class ParamPartition:
    n_ps: int
    shares: Tuple[float, ...]
    total_params_mb: int

    def __post_init__(self) -> None:
        if len(self.shares) != self.n_ps:
            raise ValueError("len(shares) must equal n_ps")
        if abs(sum(self.shares) - 1.0) > 1e-9:
            raise ValueError("shares must sum to 1")


def repartition(p: ParamPartition, new_n_ps: int, placement: Placement = Placement()) -> ParamPartition:
    if new_n_ps < 1:
        raise ValueError("new_n_ps must be >= 1")
    shares = placement.shares(new_n_ps)
    # renormalise in float64 so the invariant holds to 1e-9
    total = sum(shares)
    shares = [s / total for s in shares]
    return ParamPartition(new_n_ps, tuple(shares), p.total_params_mb)


def checkpoint_seconds(params_mb: float, bandwidth_mb_s: float) -> float:
    return params_mb / bandwidth_mb_s


def restore_seconds(p: ParamPartition, bandwidth_mb_s: float) -> float:
    """PS restore their parts in parallel; the largest part dominates."""
    return max(p.shares) * p.total_params_mb / bandwidth_mb_s


# -- PS scaling ---------------------------------------------------------------------


class PsScalePhase(str, Enum):
    STABLE = "STABLE"
    NEW_PS_PENDING = "NEW_PS_PENDING"
    HALT_WORKERS = "HALT_WORKERS"
    CHECKPOINTING = "CHECKPOINTING"
    REPARTITIONING = "REPARTITIONING"
    RESTORING = "RESTORING"
    RESUMING = "RESUMING"


HALTED_PHASES = frozenset({
    PsScalePhase.HALT_WORKERS, PsScalePhase.CHECKPOINTING,
    PsScalePhase.REPARTITIONING, PsScalePhase.RESTORING,
})


class ScaleEventKind(str, Enum):
    SCALE_REQUEST = "SCALE_REQUEST"
    PS_READY = "PS_READY"
    HALTED = "HALTED"
    CHECKPOINT_DONE = "CHECKPOINT_DONE"
    REPARTITION_DONE = "REPARTITION_DONE"
    RESTORE_DONE = "RESTORE_DONE"
    RESUMED = "RESUMED"
    PS_FAILED = "PS_FAILED"


@dataclass(frozen=True)
class ScaleEvent:
    kind: ScaleEventKind
    ps: Tuple[str, ...] = ()
    release: Tuple[str, ...] = ()
    target_n_ps: Optional[int] = None
    checkpoint_ref: Optional[str] = None


@dataclass(frozen=True)
class PsScaleState:
    phase: PsScalePhase = PsScalePhase.STABLE
    old_ps: Tuple[str, ...] = ()
    new_ps: Tuple[str, ...] = ()
    waiting: Tuple[str, ...] = ()
    release: Tuple[str, ...] = ()
    target_n_ps: Optional[int] = None
    checkpoint_ref: Optional[str] = None

    @property
    def halted(self) -> bool:
        return self.phase in HALTED_PHASES


def _illegal(state: PsScaleState, ev: ScaleEvent) -> IllegalTransition:
    return IllegalTransition(f"illegal transition: {ev.kind.value} in {state.phase.value}")


def ps_scale(state: PsScaleState, ev: ScaleEvent) -> Tuple[PsScaleState, List[Directive]]:
    """Advance the PS scaling protocol by one event.

    Workers keep training while new PS start; they halt only once every new
    PS is ready, for checkpoint, repartition and restore. PS being replaced
    or removed are released after training resumes.
    """
    phase = state.phase
    kind = ev.kind
    if kind is ScaleEventKind.PS_FAILED:
        if phase is PsScalePhase.STABLE:
            raise _illegal(state, ev)
        # abort: drop never-activated PS and recover from the periodic checkpoint
        directives = []
        if state.new_ps:
            directives.append(_directive(DirectiveKind.RELEASE_PS, state.new_ps, aborted=True))
        directives.append(_directive(DirectiveKind.RELAUNCH_PS, ev.ps))
        directives.append(_directive(DirectiveKind.RESTORE, (), source="periodic"))
        return PsScaleState(old_ps=state.old_ps), directives
    if phase is PsScalePhase.STABLE:
        if kind is not ScaleEventKind.SCALE_REQUEST:
            raise _illegal(state, ev)
        if ev.ps:
            nxt = replace(state, phase=PsScalePhase.NEW_PS_PENDING, new_ps=ev.ps, waiting=ev.ps,
                          release=ev.release, target_n_ps=ev.target_n_ps)
            return nxt, [_directive(DirectiveKind.LAUNCH_PS, ev.ps)]
        nxt = replace(state, phase=PsScalePhase.HALT_WORKERS, new_ps=(), waiting=(),
                      release=ev.release, target_n_ps=ev.target_n_ps)
        return nxt, [_directive(DirectiveKind.HALT_WORKERS)]
    if phase is PsScalePhase.NEW_PS_PENDING:
        if kind is not ScaleEventKind.PS_READY:
            raise _illegal(state, ev)
        unknown = [p for p in ev.ps if p not in state.new_ps]
        if unknown:
            raise IllegalTransition(f"illegal transition: PS_READY for unknown {unknown}")
        waiting = tuple(p for p in state.waiting if p not in ev.ps)
        if waiting:
            return replace(state, waiting=waiting), []
        return replace(state, phase=PsScalePhase.HALT_WORKERS, waiting=()), [
            _directive(DirectiveKind.HALT_WORKERS)]
    expected = {
        PsScalePhase.HALT_WORKERS: (ScaleEventKind.HALTED, PsScalePhase.CHECKPOINTING,
                                    DirectiveKind.CHECKPOINT),
        PsScalePhase.CHECKPOINTING: (ScaleEventKind.CHECKPOINT_DONE, PsScalePhase.REPARTITIONING,
                                     DirectiveKind.REPARTITION),
        PsScalePhase.REPARTITIONING: (ScaleEventKind.REPARTITION_DONE, PsScalePhase.RESTORING,
                                      DirectiveKind.RESTORE),
        PsScalePhase.RESTORING: (ScaleEventKind.RESTORE_DONE, PsScalePhase.RESUMING,
                                 DirectiveKind.RESUME_WORKERS),
    }
    if phase in expected:
        want, nxt_phase, dkind = expected[phase]
        if kind is not want:
            raise _illegal(state, ev)
        ref = ev.checkpoint_ref if ev.checkpoint_ref is not None else state.checkpoint_ref
        nxt = replace(state, phase=nxt_phase, checkpoint_ref=ref)
        detail = {}
        if dkind is DirectiveKind.REPARTITION and state.target_n_ps is not None:
            detail["n_ps"] = state.target_n_ps
        if dkind is DirectiveKind.RESTORE and ref is not None:
            detail["checkpoint"] = ref
        return nxt, [_directive(dkind, (), **detail)]
    if phase is PsScalePhase.RESUMING:
        if kind is not ScaleEventKind.RESUMED:
            raise _illegal(state, ev)
        active = tuple(p for p in state.old_ps if p not in state.release) + state.new_ps
        directives = []
        if state.release:
            directives.append(_directive(DirectiveKind.RELEASE_PS, state.release))
        return PsScaleState(old_ps=active, checkpoint_ref=state.checkpoint_ref), directives
    raise _illegal(state, ev)


# -- failure recovery and worker join --------------------------------------------------


@dataclass(frozen=True)
class CheckpointRecord:
    step: int
    time: float
    ref: str


@dataclass(frozen=True)
class RecoveryPlan:
    directives: Tuple[Directive, ...]
    resume_step: int
    lost_steps: int
    restart_from_zero: bool


def ps_failure_recover(
    checkpoint: Optional[CheckpointRecord],
    failed_ps: Sequence[str],
    current_step: int,
) -> RecoveryPlan:
    """One recovery cycle for all PS that failed together."""
    failed = tuple(sorted(set(failed_ps)))
    halt = _directive(DirectiveKind.HALT_WORKERS)
    relaunch = _directive(DirectiveKind.RELAUNCH_PS, failed)
    if checkpoint is None:
        directives = (halt, relaunch, _directive(DirectiveKind.RESTART_JOB, (), step=0))
        return RecoveryPlan(directives, 0, current_step, True)
    restore = _directive(DirectiveKind.RESTORE, (), checkpoint=checkpoint.ref, step=checkpoint.step)
    resume = _directive(DirectiveKind.RESUME_WORKERS)
    return RecoveryPlan((halt, relaunch, restore, resume), checkpoint.step,
                        max(0, current_step - checkpoint.step), False)


def worker_join_ps_mode(
    phase: PsScalePhase, worker: str, registered: Sequence[str]
) -> List[Directive]:
    """Register a joining worker, deferring it while workers are halted."""
    if worker in registered:
        return []
    if phase in HALTED_PHASES:
        return [_directive(DirectiveKind.DEFER_WORKER, (worker,))]
    return [_directive(DirectiveKind.REGISTER_WORKER, (worker,))]


# -- elastic allreduce membership ------------------------------------------------------


@dataclass(frozen=True)
class WorldSpec:
    world_epoch: int = 0
    members: Tuple[Tuple[str, float], ...] = ()

    @property
    def ranks(self) -> Dict[str, int]:
        return {w: i for i, (w, _) in enumerate(self.members)}

    @property
    def size(self) -> int:
        return len(self.members)

    def rank0(self) -> Optional[str]:
        return self.members[0][0] if self.members else None

    def worker_ids(self) -> List[str]:
        return [w for w, _ in self.members]


@dataclass(frozen=True)
class WorldEvent:
    kind: str  # "join" or "leave"
    worker: str
    time: float = 0.0


def world_update(w: WorldSpec, ev: WorldEvent) -> Tuple[WorldSpec, List[Directive]]:
    """Apply a join or leave; ranks follow join order so rank 0 is the oldest."""
    present = {m for m, _ in w.members}
    if ev.kind == "join":
        if ev.worker in present:
            return w, []
        members = sorted(w.members + ((ev.worker, ev.time),), key=lambda m: (m[1], m[0]))
        new = WorldSpec(w.world_epoch + 1, tuple(members))
        return new, [_directive(DirectiveKind.BROADCAST, (new.rank0(),), epoch=new.world_epoch)]
    if ev.kind == "leave":
        if ev.worker not in present:
            return w, []
        members = tuple(m for m in w.members if m[0] != ev.worker)
        new = WorldSpec(w.world_epoch + 1, members)
        directives = [_directive(DirectiveKind.FAILURE_SIGNAL, tuple(new.worker_ids()),
                                 lost=ev.worker)]
        if members:
            directives.append(_directive(DirectiveKind.BROADCAST, (new.rank0(),),
                                         epoch=new.world_epoch))
        return new, directives
    raise ValueError(f"unknown world event {ev.kind}")

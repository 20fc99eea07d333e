"""Simulation report: summary metrics, time series and event trace.

Reports serialise with sorted keys and floats rounded to 6 decimals so two
runs with identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import TYPE_CHECKING, Any, Dict, List, Optional

if TYPE_CHECKING:
    from .engine import Simulation

REPORT_SCHEMA_VERSION = 1
FLOAT_DIGITS = 6

# top-level keys and their meaning, kept stable for downstream tooling
REPORT_KEYS = {
    "schema_version": "integer report format version",
    "scenario": "scenario name",
    "policy": "policy that managed the job",
    "seed": "RNG seed of the run",
    "status": "COMPLETED or FAILED",
    "failure_reason": "why the job failed, or null",
    "jct": "job completion time in seconds, or null when failed",
    "end_time": "simulated time at which the run stopped",
    "samples_per_epoch": "samples completed per finished epoch",
    "dataset_size": "samples per epoch expected",
    "lost_steps": "global steps rolled back by PS failure recovery",
    "restarted_from_zero": "true if a PS failed before any checkpoint",
    "checkpoints": "number of checkpoints taken",
    "halts": "intervals in which workers were halted, with the cause",
    "halt_seconds": "total halted time",
    "pods": "per-pod lifecycle: spec, pending interval, ready and end times, final phase",
    "series": "sampled throughput (steps/s), worker count, PS utilisation and CPU",
    "decisions": "policy decisions with time, reason and plan",
    "brain_audit": "brain events and decisions (DLRover policy only)",
    "plans": "plans applied by the simulator",
    "trace": "lifecycle event trace (shard-level events omitted)",
    "final_plan": "last applied plan",
}

SERIES_COLUMNS = {
    "throughput": ("time", "steps_per_s"),
    "workers": ("time", "workers"),
    "ps_util": ("time", "ps", "utilization"),
    "ps_cpu": ("time", "ps_cpu"),
    "worker_cpu": ("time", "worker_cpu"),
}


def _round(obj: Any) -> Any:
    if isinstance(obj, float):
        r = round(obj, FLOAT_DIGITS)
        return 0.0 if r == 0 else r
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


@dataclass
class SimReport:
    scenario: str
    policy: str
    seed: int
    status: str
    failure_reason: Optional[str]
    jct: Optional[float]
    end_time: float
    samples_per_epoch: List[int]
    dataset_size: int
    lost_steps: int
    restarted_from_zero: bool
    checkpoints: int
    halts: List[Dict[str, Any]]
    halt_seconds: float
    pods: List[Dict[str, Any]]
    series: Dict[str, List[Any]]
    decisions: List[Dict[str, Any]]
    brain_audit: List[Dict[str, Any]]
    plans: List[Dict[str, Any]]
    trace: List[Dict[str, Any]]
    final_plan: Optional[str]
    schema_version: int = REPORT_SCHEMA_VERSION
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return self.status == "COMPLETED"

    @property
    def conserved(self) -> bool:
        """Every epoch processed exactly the dataset."""
        return (self.completed and bool(self.samples_per_epoch)
                and all(s == self.dataset_size for s in self.samples_per_epoch))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("extra")
        return _round(data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def series_csv(self, name: str) -> str:
        """One series as CSV text; ``ps_util`` is emitted in long form, one row per PS."""
        if name not in SERIES_COLUMNS:
            raise KeyError(name)
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(SERIES_COLUMNS[name])
        for t, v in self.series[name]:
            if isinstance(v, list):
                for j, u in enumerate(v):
                    out.writerow([f"{t:.6f}", j, f"{u:.6f}"])
            else:
                out.writerow([f"{t:.6f}", f"{v:.6f}" if isinstance(v, float) else v])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SimReport":
        """Rebuild a report from its serialised form; unknown keys are rejected."""
        names = {f.name for f in fields(cls)} - {"extra"}
        unknown = set(data) - names
        missing = names - set(data) - {"schema_version"}
        if unknown or missing:
            raise ValueError(f"not a report: unknown keys {sorted(unknown)}, "
                             f"missing keys {sorted(missing)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "SimReport":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_simulation(cls, sim: "Simulation") -> "SimReport":
        pods = []
        for p in sim.pods.values():
            pods.append({
                "pod_id": p.pod_id, "role": p.role.value, "cpu": p.spec.cpu_cores,
                "memory_mb": p.spec.memory_mb, "low_priority": p.spec.low_priority,
                "index": p.index, "phase": p.phase.value, "machine_speed": p.machine_speed,
                "created_at": p.created_at, "started_at": p.started_at, "ready_at": p.ready_at,
                "ended_at": p.ended_at,
                "pending": [p.created_at, p.started_at if p.started_at is not None else sim.now],
            })
        manager = sim.manager
        samples = list(getattr(manager, "samples_per_epoch", []) or [])
        audit = []
        brain = getattr(sim.policy, "brain", None)
        if brain is not None:
            audit = list(brain.audit_log)
        return cls(
            scenario=sim.sc.name, policy=sim.sc.policy.value, seed=sim.seed, status=sim.status,
            failure_reason=sim.failure_reason, jct=sim.jct, end_time=sim.now,
            samples_per_epoch=[int(s) for s in samples], dataset_size=sim.job.dataset_size,
            lost_steps=sim.lost_steps, restarted_from_zero=sim.restarted_from_zero,
            checkpoints=sim.n_checkpoints, halts=list(sim.halts),
            halt_seconds=sum(h["end"] - h["start"] for h in sim.halts),
            pods=pods, series=sim.series, decisions=list(sim.policy.decisions),
            brain_audit=audit, plans=list(sim.plan_log), trace=list(sim.trace),
            final_plan=sim.plan.describe() if sim.plan is not None else None,
        )

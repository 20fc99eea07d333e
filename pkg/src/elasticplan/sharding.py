"""Dynamic data sharding with TODO/DOING queues.

An epoch is split into contiguous index-range shards. Shards are leased to
workers on request; a lease ends with a SUCCESS or FAIL report, a worker loss,
or a lease timeout. TODO is held compactly as::

    head deque (recovered shards)  +  fresh range [next_fresh, n)  +  tail deque (failed shards)

so an epoch with millions of shards costs O(1) memory until shards move.
"""

from __future__ import annotations

import json
import logging
import random
import statistics
import zlib
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Any, Deque, Dict, Iterable, List, Optional, Sequence, Union

logger = logging.getLogger(__name__)


class ShardError(Exception):
    pass


class LeaseMismatch(ShardError):
    pass


class EpochFailed(ShardError):
    pass


class SnapshotError(ShardError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"corrupt snapshot at offset {offset}: {message}")


class ShardState(str, Enum):
    TODO = "TODO"
    DOING = "DOING"
    DONE = "DONE"


class Outcome(str, Enum):
    SUCCESS = "SUCCESS"
    FAIL = "FAIL"


class Signal(str, Enum):
    WAIT = "WAIT"
    EXHAUSTED = "EXHAUSTED"


@dataclass(frozen=True)
class Shard:
    shard_id: int
    start: int
    end: int
    state: ShardState
    lessee: Optional[str]
    epoch: int

    @property
    def size(self) -> int:
        return self.end - self.start


def default_shard_size(batch_size: int) -> int:
    return 4 * batch_size


class ShardQueues:
    """Lease state for one epoch. Not thread-safe; callers serialize access."""

    def __init__(
        self,
        dataset_size: int,
        shard_size: int,
        epoch: int = 0,
        retry_cap: int = 3,
        rng: Optional[Any] = None,
        lease_timeout: Optional[float] = None,
    ):
        if dataset_size < 1 or shard_size < 1:
            raise ShardError("dataset_size and shard_size must be >= 1")
        self.dataset_size = dataset_size
        self.shard_size = shard_size
        self.epoch = epoch
        self.retry_cap = retry_cap
        self.rng = rng if rng is not None else random.Random(0)
        self.lease_timeout = lease_timeout
        self.n_shards = -(-dataset_size // shard_size)
        self.next_fresh = 0
        self._head: Deque[int] = deque()
        self._tail: Deque[int] = deque()
        self._queued: set = set()
        self.doing: Dict[int, tuple] = {}
        self.done_count = 0
        self.done_samples = 0
        self.fail_counts: Dict[int, int] = {}
        self.weights: Dict[str, float] = {}
        self.workers: Dict[str, None] = {}
        self.failed = False
        self._service_times: Deque[float] = deque(maxlen=256)

    # -- queue views -----------------------------------------------------------------

    @property
    def todo(self) -> List[int]:
        return list(self._head) + list(range(self.next_fresh, self.n_shards)) + list(self._tail)

    @property
    def todo_count(self) -> int:
        return len(self._head) + (self.n_shards - self.next_fresh) + len(self._tail)

    def bounds(self, shard_id: int) -> tuple:
        start = shard_id * self.shard_size
        return start, min(start + self.shard_size, self.dataset_size)

    def shard(self, shard_id: int) -> Shard:
        start, end = self.bounds(shard_id)
        if shard_id in self.doing:
            return Shard(shard_id, start, end, ShardState.DOING, self.doing[shard_id][0], self.epoch)
        if shard_id in self._queued or shard_id >= self.next_fresh:
            return Shard(shard_id, start, end, ShardState.TODO, None, self.epoch)
        return Shard(shard_id, start, end, ShardState.DONE, None, self.epoch)

    def done_shard_ids(self) -> List[int]:
        return [i for i in range(self.next_fresh) if i not in self._queued and i not in self.doing]

    def check_invariants(self) -> None:
        total = self.done_count + self.todo_count + len(self.doing)
        if total != self.n_shards:
            raise AssertionError(f"conservation broken: {total} != {self.n_shards}")
        if self._queued & set(self.doing):
            raise AssertionError("shard both TODO and DOING")

    @property
    def exhausted(self) -> bool:
        return self.todo_count == 0 and not self.doing

    # -- worker registry -------------------------------------------------------------

    def register(self, worker: str) -> None:
        self.workers.setdefault(worker, None)

    def deregister(self, worker: str) -> None:
        self.workers.pop(worker, None)
        self.weights.pop(worker, None)

    def set_weights(self, weights: Dict[str, float]) -> None:
        for w, v in weights.items():
            if not 0.0 <= v <= 1.0:
                raise ShardError(f"weight for {w} must be in [0, 1]")
        self.weights.update(weights)

    # -- leasing ---------------------------------------------------------------------

    def _pop_todo(self) -> int:
        if self._head:
            sid = self._head.popleft()
            self._queued.discard(sid)
            return sid
        if self.next_fresh < self.n_shards:
            sid = self.next_fresh
            self.next_fresh += 1
            return sid
        sid = self._tail.popleft()
        self._queued.discard(sid)
        return sid

    def acquire(self, worker: str, now: float = 0.0) -> Union[Shard, Signal]:
        if worker not in self.workers:
            raise ShardError(f"worker {worker} not registered")
        if self.failed:
            raise EpochFailed(f"epoch {self.epoch} failed after retry cap")
        if self.todo_count == 0:
            return Signal.EXHAUSTED if not self.doing else Signal.WAIT
        weight = self.weights.get(worker, 1.0)
        if weight < 1.0 and len(self.workers) > 1 and self.rng.random() >= weight:
            return Signal.WAIT
        sid = self._pop_todo()
        self.doing[sid] = (worker, now)
        return self.shard(sid)

    def report(self, shard_id: int, worker: str, outcome: Outcome, now: float = 0.0) -> None:
        lease = self.doing.get(shard_id)
        if lease is None or lease[0] != worker:
            raise LeaseMismatch(f"lease mismatch: shard {shard_id} not leased by {worker}")
        del self.doing[shard_id]
        if outcome is Outcome.SUCCESS:
            self.done_count += 1
            start, end = self.bounds(shard_id)
            self.done_samples += end - start
            self._service_times.append(max(0.0, now - lease[1]))
            return
        self.fail_counts[shard_id] = self.fail_counts.get(shard_id, 0) + 1
        self._tail.append(shard_id)
        self._queued.add(shard_id)
        if self.fail_counts[shard_id] > self.retry_cap:
            self.failed = True
            raise EpochFailed(f"shard {shard_id} failed {self.fail_counts[shard_id]} times")

    def _requeue_head(self, ids: Iterable[int]) -> None:
        for sid in sorted(ids, reverse=True):
            self._head.appendleft(sid)
            self._queued.add(sid)

    def on_worker_lost(self, worker: str) -> List[int]:
        lost = [sid for sid, (w, _) in self.doing.items() if w == worker]
        for sid in lost:
            del self.doing[sid]
        self._requeue_head(lost)
        self.deregister(worker)
        return sorted(lost)

    def median_service_time(self) -> Optional[float]:
        if not self._service_times:
            return None
        return statistics.median(self._service_times)

    def effective_lease_timeout(self) -> Optional[float]:
        if self.lease_timeout is not None:
            return self.lease_timeout
        med = self.median_service_time()
        return None if med is None or med <= 0 else 10.0 * med

    def reclaim_expired(self, now: float) -> List[int]:
        timeout = self.effective_lease_timeout()
        if timeout is None:
            return []
        expired = [sid for sid, (_, t) in self.doing.items() if now - t > timeout]
        for sid in expired:
            del self.doing[sid]
        self._requeue_head(expired)
        return sorted(expired)

    # -- snapshots -------------------------------------------------------------------

    def snapshot(self) -> Dict[str, Any]:
        return {
            "version": 1,
            "dataset_size": self.dataset_size,
            "shard_size": self.shard_size,
            "epoch": self.epoch,
            "retry_cap": self.retry_cap,
            "next_fresh": self.next_fresh,
            "head": list(self._head),
            "tail": list(self._tail),
            "doing": sorted(self.doing),
            "done_count": self.done_count,
            "done_samples": self.done_samples,
            "fail_counts": {str(k): v for k, v in sorted(self.fail_counts.items())},
            "weights": dict(sorted(self.weights.items())),
            "workers": list(self.workers),
        }

    @classmethod
    def from_snapshot(cls, snap: Dict[str, Any], rng: Optional[Any] = None) -> "ShardQueues":
        q = cls(snap["dataset_size"], snap["shard_size"], snap["epoch"],
                retry_cap=snap.get("retry_cap", 3), rng=rng)
        q.next_fresh = snap["next_fresh"]
        q._head = deque(snap["head"])
        q._tail = deque(snap["tail"])
        q._queued = set(q._head) | set(q._tail)
        # in-flight work is not assumed delivered
        q._requeue_head(snap["doing"])
        q.done_count = snap["done_count"]
        q.done_samples = snap["done_samples"]
        q.fail_counts = {int(k): v for k, v in snap["fail_counts"].items()}
        q.weights = dict(snap["weights"])
        q.workers = {w: None for w in snap["workers"]}
        q.check_invariants()
        return q


def create_epoch(dataset_size: int, shard_size: int, epoch: int = 0, **kwargs: Any) -> ShardQueues:
    return ShardQueues(dataset_size, shard_size, epoch, **kwargs)


def _seal(body: Dict[str, Any]) -> str:
    payload = json.dumps(body, sort_keys=True, separators=(",", ":"))
    crc = zlib.crc32(payload.encode("utf-8"))
    return json.dumps({"crc32": crc, "body": body}, sort_keys=True, separators=(",", ":"))


def _unseal(text: str) -> Dict[str, Any]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SnapshotError(exc.msg, exc.pos) from exc
    if not isinstance(doc, dict) or "body" not in doc or "crc32" not in doc:
        raise SnapshotError("missing envelope fields", 0)
    payload = json.dumps(doc["body"], sort_keys=True, separators=(",", ":"))
    if zlib.crc32(payload.encode("utf-8")) != doc["crc32"]:
        raise SnapshotError("checksum mismatch", max(0, text.find('"body"')))
    return doc["body"]


def checkpoint_queues(q: ShardQueues) -> str:
    return _seal(q.snapshot())


def restore_queues(text: str, rng: Optional[Any] = None) -> ShardQueues:
    """Rebuild queues; shards that were DOING come back as TODO."""
    body = _unseal(text)
    try:
        return ShardQueues.from_snapshot(body, rng=rng)
    except (KeyError, TypeError, ValueError, AssertionError, ShardError) as exc:
        key = str(exc).strip("'")
        offset = text.find(f'"{key}"')
        raise SnapshotError(f"invalid field: {exc}", max(0, offset)) from exc


class DatasetShardManager:
    """Shard queues across all epochs of a job."""

    def __init__(
        self,
        dataset_size: int,
        shard_size: int,
        epochs: int = 1,
        rng: Optional[Any] = None,
        retry_cap: int = 3,
        lease_timeout: Optional[float] = None,
    ):
        self.dataset_size = dataset_size
        self.shard_size = shard_size
        self.epochs = epochs
        self.rng = rng if rng is not None else random.Random(0)
        self.retry_cap = retry_cap
        self.lease_timeout = lease_timeout
        self.samples_per_epoch: List[int] = []
        self.queues = self._new_queues(0)

    def _new_queues(self, epoch: int) -> ShardQueues:
        return ShardQueues(self.dataset_size, self.shard_size, epoch, retry_cap=self.retry_cap,
                           rng=self.rng, lease_timeout=self.lease_timeout)

    @property
    def epoch(self) -> int:
        return self.queues.epoch

    @property
    def finished(self) -> bool:
        return len(self.samples_per_epoch) == self.epochs

    def register(self, worker: str) -> None:
        self.queues.register(worker)

    def set_weights(self, weights: Dict[str, float]) -> None:
        self.queues.set_weights(weights)

    def acquire(self, worker: str, now: float = 0.0) -> Union[Shard, Signal]:
        if self.finished:
            return Signal.EXHAUSTED
        got = self.queues.acquire(worker, now)
        if got is Signal.EXHAUSTED:
            self._advance_epoch()
            if self.finished:
                return Signal.EXHAUSTED
            return self.queues.acquire(worker, now)
        return got

    def _advance_epoch(self) -> None:
        self.samples_per_epoch.append(self.queues.done_samples)
        if self.finished:
            return
        old = self.queues
        self.queues = self._new_queues(old.epoch + 1)
        self.queues.workers = dict(old.workers)
        self.queues.weights = dict(old.weights)

    def report(self, shard: Shard, worker: str, outcome: Outcome, now: float = 0.0) -> None:
        if shard.epoch != self.queues.epoch:
            raise LeaseMismatch(f"lease mismatch: shard from epoch {shard.epoch}")
        self.queues.report(shard.shard_id, worker, outcome, now)
        if self.queues.exhausted:
            self._advance_epoch()

    def on_worker_lost(self, worker: str) -> List[int]:
        return self.queues.on_worker_lost(worker)

    def samples_done(self) -> int:
        done = sum(self.samples_per_epoch)
        if not self.finished:
            done += self.queues.done_samples
        return done

    def checkpoint(self) -> str:
        body = {"epochs": self.epochs, "samples_per_epoch": list(self.samples_per_epoch),
                "finished": self.finished, "queues": self.queues.snapshot()}
        return _seal(body)

    def restore(self, text: str) -> None:
        body = _unseal(text)
        try:
            queues = ShardQueues.from_snapshot(body["queues"], rng=self.rng)
            samples = [int(x) for x in body["samples_per_epoch"]]
        except (KeyError, TypeError, ValueError, AssertionError) as exc:
            raise SnapshotError(f"invalid field: {exc}", 0) from exc
        queues.workers = dict(self.queues.workers)
        queues.weights = dict(self.queues.weights)
        queues.lease_timeout = self.lease_timeout
        self.queues = queues
        self.samples_per_epoch = samples


@dataclass(frozen=True)
class BatchAllotment:
    per_worker_minibatches: Dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.per_worker_minibatches.values())


def batch_allotment(n_global: int, active_workers: Sequence[str]) -> BatchAllotment:
    """Split ``n_global`` mini-batches over workers: m_i = N//N0 + [i < N % N0]."""
    n0 = len(active_workers)
    if n0 < 1:
        raise ShardError("no active workers")
    if n0 > n_global:
        raise ShardError("more workers than global batch multiple")
    base, extra = divmod(n_global, n0)
    return BatchAllotment({w: base + (1 if i < extra else 0) for i, w in enumerate(active_workers)})


class StaticPartitionManager:
    """Fixed per-worker partition with no recovery, as in a static cluster.

    Worker ``i`` of ``n`` owns samples ``[i*D//n, (i+1)*D//n)`` of every epoch
    and processes its slice epoch after epoch.
    """

    def __init__(self, dataset_size: int, shard_size: int, epochs: int, workers: Sequence[str]):
        if not workers:
            raise ShardError("static partition needs workers")
        self.dataset_size = dataset_size
        self.shard_size = shard_size
        self.epochs = epochs
        self.order = list(workers)
        self._plan: Dict[str, Deque[tuple]] = {}
        n = len(workers)
        self._epoch_total = [0] * epochs
        sid = 0
        for i, w in enumerate(workers):
            lo, hi = i * dataset_size // n, (i + 1) * dataset_size // n
            items: Deque[tuple] = deque()
            for e in range(epochs):
                for start in range(lo, hi, shard_size):
                    items.append((e, sid, start, min(start + shard_size, hi)))
                    sid += 1
            self._plan[w] = items
        self._doing: Dict[str, Shard] = {}
        self._done = [0] * epochs
        self.samples_per_epoch: List[int] = []

    @property
    def finished(self) -> bool:
        return not self._doing and all(not q for q in self._plan.values())

    @property
    def epoch(self) -> int:
        return len(self.samples_per_epoch)

    def register(self, worker: str) -> None:
        if worker not in self._plan:
            raise ShardError(f"worker {worker} has no static partition")

    def set_weights(self, weights: Dict[str, float]) -> None:
        logger.debug("static partition ignores weights")

    def acquire(self, worker: str, now: float = 0.0) -> Union[Shard, Signal]:
        self.register(worker)
        if worker in self._doing:
            raise ShardError(f"worker {worker} already holds a shard")
        items = self._plan[worker]
        if not items:
            return Signal.EXHAUSTED
        e, sid, start, end = items.popleft()
        shard = Shard(sid, start, end, ShardState.DOING, worker, e)
        self._doing[worker] = shard
        return shard

    def report(self, shard: Shard, worker: str, outcome: Outcome, now: float = 0.0) -> None:
        held = self._doing.get(worker)
        if held is None or held.shard_id != shard.shard_id:
            raise LeaseMismatch(f"lease mismatch: shard {shard.shard_id} not leased by {worker}")
        if outcome is not Outcome.SUCCESS:
            raise EpochFailed("static partition cannot retry shards")
        del self._doing[worker]
        self._done[shard.epoch] += shard.size
        if self.finished:
            self.samples_per_epoch = list(self._done)

    def on_worker_lost(self, worker: str) -> List[int]:
        raise ShardError(f"static partition cannot recover shards of {worker}")

    def samples_done(self) -> int:
        return sum(self._done)

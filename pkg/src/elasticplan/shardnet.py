"""Line-delimited JSON protocol exposing a shard manager and world membership over TCP.

Every request is one JSON object on one line::

    {"msg_id": 7, "kind": "GET_SHARD", "worker": "w0", "body": {}}

and receives exactly one reply line bearing the same ``msg_id``::

    {"msg_id": 7, "kind": "ACK", "body": {"shard": {"shard_id": 0, ...}}}

Malformed lines get an ``ERR`` reply whose body carries the error text and
the character offset at which parsing failed; ``msg_id`` is null when it
could not be read. Replies to mutating requests are cached per worker so a
retried ``msg_id`` returns the original reply without touching state again.

Request kinds and bodies:

``REGISTER``      join the job; reply ``{"rank", "world_epoch"}``
``GET_SHARD``     reply ``{"shard": {...}}`` or ``{"signal": "WAIT"|"EXHAUSTED"}``
``REPORT_SHARD``  body ``{"shard_id", "epoch", "outcome": "SUCCESS"|"FAIL"}``
``HEARTBEAT``     keep the worker alive; reply ``{}``
``QUERY_RANK``    reply ``{"rank", "world_epoch"}``
``QUERY_WORLD``   reply ``{"world_epoch", "members": [[worker, rank], ...]}``
``CHECKPOINT``    no body: reply ``{"snapshot"}``; body ``{"restore": snapshot}`` restores
"""

from __future__ import annotations

import itertools
import json
import logging
import socket
import socketserver
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple, Union

from . import coord
from .sharding import Outcome, Shard, ShardError, ShardState, Signal

logger = logging.getLogger(__name__)

MAX_LINE_BYTES = 64 * 1024
REQUEST_KINDS = ("REGISTER", "GET_SHARD", "REPORT_SHARD", "HEARTBEAT", "QUERY_RANK",
                 "QUERY_WORLD", "CHECKPOINT")
REPLY_KINDS = ("ACK", "ERR")
MUTATING_KINDS = ("REGISTER", "GET_SHARD", "REPORT_SHARD", "CHECKPOINT")
NEEDS_WORKER = ("REGISTER", "GET_SHARD", "REPORT_SHARD", "HEARTBEAT", "QUERY_RANK")


class ProtocolError(Exception):
    """A reply could not be understood or did not match its request."""


class ServerError(Exception):
    """The server answered a request with ERR."""


class RetriableError(Exception):
    """The request timed out or the connection failed after all retries."""


class _BadRequest(Exception):
    def __init__(self, message: str, position: Optional[int] = None):
        super().__init__(message)
        self.position = position


class _WithId(_BadRequest):
    def __init__(self, msg_id: int, message: str, position: Optional[int] = None):
        super().__init__(message, position)
        self.msg_id = msg_id


def encode(msg: Dict[str, Any]) -> bytes:
    # json escapes newlines inside strings, so one message is always one line
    return (json.dumps(msg, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def _err(msg_id: Optional[int], message: str, position: Optional[int] = None) -> Dict[str, Any]:
    return {"msg_id": msg_id, "kind": "ERR", "body": {"error": message, "position": position}}


def _ack(msg_id: int, body: Dict[str, Any]) -> Dict[str, Any]:
    return {"msg_id": msg_id, "kind": "ACK", "body": body}


def _shard_dict(s: Shard) -> Dict[str, Any]:
    return {"shard_id": s.shard_id, "start": s.start, "end": s.end, "epoch": s.epoch}


def parse_request(line: bytes) -> Tuple[int, str, Optional[str], Dict[str, Any], Optional[str]]:
    """Validate one request line; raises ``_BadRequest`` with a position."""
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise _BadRequest(f"invalid utf-8: {exc.reason}", exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _BadRequest(f"invalid json: {exc.msg}", exc.pos) from None
    except RecursionError:
        raise _BadRequest("invalid json: nesting too deep", 0) from None
    except ValueError as exc:  # e.g. integers beyond the digit limit
        raise _BadRequest(f"invalid json: {exc}", 0) from None
    if not isinstance(obj, dict):
        raise _BadRequest("message must be a JSON object", 0)
    msg_id = obj.get("msg_id")
    if not isinstance(msg_id, int) or isinstance(msg_id, bool):
        raise _BadRequest("msg_id must be an integer", _field_pos(text, "msg_id"))
    kind = obj.get("kind")
    if kind not in REQUEST_KINDS:
        raise _WithId(msg_id, f"unknown kind {kind!r}", _field_pos(text, "kind"))
    worker = obj.get("worker")
    if worker is not None and (not isinstance(worker, str) or not worker):
        raise _WithId(msg_id, "worker must be a non-empty string", _field_pos(text, "worker"))
    if kind in NEEDS_WORKER and worker is None:
        raise _WithId(msg_id, f"{kind} needs a worker", 0)
    body = obj.get("body", {})
    if not isinstance(body, dict):
        raise _WithId(msg_id, "body must be an object", _field_pos(text, "body"))
    job_id = obj.get("job_id")
    if job_id is not None and not isinstance(job_id, str):
        raise _WithId(msg_id, "job_id must be a string", _field_pos(text, "job_id"))
    return msg_id, kind, worker, body, job_id


def _field_pos(text: str, key: str) -> int:
    pos = text.find(f'"{key}"')
    return pos if pos >= 0 else 0


@dataclass
class _WorkerState:
    last_seen: float
    replies: "OrderedDict[int, Dict[str, Any]]"


class ShardService:
    """Request handling without sockets: owns the manager and the world.

    All state changes go through one lock, so concurrent connections are
    serialised exactly like calls from a single owner.
    """

    def __init__(self, manager: Any, job_id: Optional[str] = None,
                 heartbeat_interval: float = 2.0, max_missed: int = 3,
                 clock: Callable[[], float] = time.monotonic, dedup_window: int = 1024):
        self.manager = manager
        self.job_id = job_id
        self.heartbeat_interval = heartbeat_interval
        self.max_missed = max_missed
        self.clock = clock
        self.dedup_window = dedup_window
        self.world = coord.WorldSpec()
        self.workers: Dict[str, _WorkerState] = {}
        self.leases: Dict[Tuple[str, int], Shard] = {}
        self.lost: Dict[str, float] = {}
        self._lock = threading.Lock()

    # -- entry point -----------------------------------------------------------------

    def handle_line(self, line: bytes) -> bytes:
        """Reply (one encoded line) for one request line; never raises."""
        try:
            reply = self._handle(line)
        except Exception as exc:  # last line of defence: the connection must get a reply
            logger.exception("internal error handling request")
            reply = _err(None, f"internal error: {type(exc).__name__}")
        return encode(reply)

    def _handle(self, line: bytes) -> Dict[str, Any]:
        if len(line) > MAX_LINE_BYTES:
            return _err(None, f"line longer than {MAX_LINE_BYTES} bytes", MAX_LINE_BYTES)
        try:
            msg_id, kind, worker, body, job_id = parse_request(line)
        except _WithId as exc:
            return _err(exc.msg_id, str(exc), exc.position)
        except _BadRequest as exc:
            return _err(None, str(exc), exc.position)
        if job_id is not None and self.job_id is not None and job_id != self.job_id:
            return _err(msg_id, f"unknown job {job_id}", 0)
        with self._lock:
            now = self.clock()
            state = self.workers.get(worker) if worker is not None else None
            if state is not None:
                state.last_seen = now
                cached = state.replies.get(msg_id)
                if cached is not None and kind in MUTATING_KINDS:
                    return cached
            try:
                reply = _ack(msg_id, self._dispatch(kind, worker, body, now))
            except (_BadRequest, ShardError, ValueError, KeyError, TypeError) as exc:
                reply = _err(msg_id, str(exc) or type(exc).__name__,
                             getattr(exc, "position", None))
            state = self.workers.get(worker) if worker is not None else None
            if state is not None and kind in MUTATING_KINDS:
                state.replies[msg_id] = reply
                while len(state.replies) > self.dedup_window:
                    state.replies.popitem(last=False)
            return reply

    # -- operations ------------------------------------------------------------------

    def _dispatch(self, kind: str, worker: Optional[str], body: Dict[str, Any],
                  now: float) -> Dict[str, Any]:
        if kind == "QUERY_WORLD":
            return {"world_epoch": self.world.world_epoch,
                    "members": [[w, r] for w, r in sorted(self.world.ranks.items(),
                                                          key=lambda kv: kv[1])]}
        if kind == "CHECKPOINT":
            if "restore" in body:
                snap = body["restore"]
                if not isinstance(snap, str):
                    raise _BadRequest("restore must be a snapshot string")
                self.manager.restore(snap)
                self.leases.clear()
                return {"restored": True}
            return {"snapshot": self.manager.checkpoint()}
        if kind == "REGISTER":
            if worker not in self.workers:
                self.manager.register(worker)
                self.workers[worker] = _WorkerState(now, OrderedDict())
                self.lost.pop(worker, None)
                self.world, _ = coord.world_update(self.world, coord.WorldEvent("join", worker, now))
            return self._rank(worker)
        if worker not in self.workers:
            raise _BadRequest(f"worker {worker} is not registered")
        if kind == "HEARTBEAT":
            return {}
        if kind == "QUERY_RANK":
            return self._rank(worker)
        if kind == "GET_SHARD":
            got = self.manager.acquire(worker, now)
            if isinstance(got, Signal):
                return {"signal": got.value}
            self.leases[(worker, got.shard_id)] = got
            return {"shard": _shard_dict(got)}
        if kind == "REPORT_SHARD":
            sid, epoch, outcome = body.get("shard_id"), body.get("epoch"), body.get("outcome")
            if not isinstance(sid, int) or not isinstance(epoch, int):
                raise _BadRequest("REPORT_SHARD needs integer shard_id and epoch")
            try:
                out = Outcome(outcome)
            except ValueError:
                raise _BadRequest(f"bad outcome {outcome!r}") from None
            held = self.leases.get((worker, sid))
            if held is None or held.epoch != epoch:
                raise _BadRequest(f"lease mismatch: {worker} does not hold shard {sid}")
            self.manager.report(held, worker, out, now)
            del self.leases[(worker, sid)]
            return {}
        raise _BadRequest(f"unhandled kind {kind}")

    def _rank(self, worker: str) -> Dict[str, Any]:
        return {"rank": self.world.ranks.get(worker), "world_epoch": self.world.world_epoch}

    # -- liveness --------------------------------------------------------------------

    def reap(self, now: Optional[float] = None) -> list:
        """Treat workers silent for ``max_missed`` heartbeats as lost."""
        with self._lock:
            now = self.clock() if now is None else now
            limit = self.heartbeat_interval * self.max_missed
            gone = sorted(w for w, s in self.workers.items() if now - s.last_seen > limit)
            for w in gone:
                recovered = self.manager.on_worker_lost(w)
                for key in [k for k in self.leases if k[0] == w]:
                    del self.leases[key]
                del self.workers[w]
                self.lost[w] = now
                self.world, _ = coord.world_update(self.world, coord.WorldEvent("leave", w, now))
                logger.info("worker %s lost after missed heartbeats; requeued %s", w, recovered)
            return gone


class _Handler(socketserver.StreamRequestHandler):
    server: "_TCPServer"

    def handle(self) -> None:
        service = self.server.service
        while True:
            try:
                line = self.rfile.readline(MAX_LINE_BYTES + 1)
            except (ConnectionError, OSError):
                return
            if not line:
                return
            if len(line) > MAX_LINE_BYTES and not line.endswith(b"\n"):
                # drain the rest of the oversized line before replying once
                while True:
                    chunk = self.rfile.readline(MAX_LINE_BYTES)
                    if not chunk or chunk.endswith(b"\n"):
                        break
                reply = encode(_err(None, f"line longer than {MAX_LINE_BYTES} bytes",
                                    MAX_LINE_BYTES))
            else:
                reply = service.handle_line(line.rstrip(b"\r\n"))
            try:
                self.wfile.write(reply)
                self.wfile.flush()
            except (ConnectionError, OSError):
                return


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr: Tuple[str, int], service: ShardService):
        self.service = service
        super().__init__(addr, _Handler)


class ShardServer:
    """TCP front end of a :class:`ShardService` with a heartbeat reaper thread."""

    def __init__(self, service: ShardService, host: str = "127.0.0.1", port: int = 0):
        self.service = service
        self._tcp = _TCPServer((host, port), service)
        self._stop = threading.Event()
        self._threads: list = []

    @property
    def address(self) -> Tuple[str, int]:
        return self._tcp.server_address[:2]

    def start(self) -> "ShardServer":
        serve = threading.Thread(target=self._tcp.serve_forever, name="shardnet-serve", daemon=True)
        reaper = threading.Thread(target=self._reap_loop, name="shardnet-reaper", daemon=True)
        self._threads = [serve, reaper]
        for t in self._threads:
            t.start()
        logger.info("shardnet serving on %s:%d", *self.address)
        return self

    def _reap_loop(self) -> None:
        while not self._stop.wait(self.service.heartbeat_interval):
            self.service.reap()

    def stop(self) -> None:
        self._stop.set()
        self._tcp.shutdown()
        self._tcp.server_close()
        for t in self._threads:
            t.join(timeout=5)

    def __enter__(self) -> "ShardServer":
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.stop()


def serve(manager: Any, host: str = "127.0.0.1", port: int = 0, **kwargs: Any) -> ShardServer:
    """Start serving ``manager`` and return the running server."""
    return ShardServer(ShardService(manager, **kwargs), host, port).start()


class ShardClient:
    """Blocking client; each call retries with the same ``msg_id`` on timeouts."""

    def __init__(self, address: Tuple[str, int], worker: str, timeout: float = 5.0,
                 retries: int = 3, job_id: Optional[str] = None, msg_id_start: Optional[int] = None):
        self.address = address
        self.worker = worker
        self.timeout = timeout
        self.retries = retries
        self.job_id = job_id
        start = msg_id_start if msg_id_start is not None else time.time_ns() % (1 << 40)
        self._ids = itertools.count(start)
        self._sock: Optional[socket.socket] = None
        self._rfile: Any = None

    def _connect(self) -> None:
        self.close()
        self._sock = socket.create_connection(self.address, timeout=self.timeout)
        self._rfile = self._sock.makefile("rb")

    def close(self) -> None:
        if self._rfile is not None:
            self._rfile.close()
        if self._sock is not None:
            self._sock.close()
        self._sock = self._rfile = None

    def __enter__(self) -> "ShardClient":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def call(self, kind: str, body: Optional[Dict[str, Any]] = None,
             msg_id: Optional[int] = None) -> Dict[str, Any]:
        msg_id = next(self._ids) if msg_id is None else msg_id
        msg: Dict[str, Any] = {"msg_id": msg_id, "kind": kind, "worker": self.worker,
                               "body": body or {}}
        if self.job_id is not None:
            msg["job_id"] = self.job_id
        data = encode(msg)
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            try:
                if self._sock is None:
                    self._connect()
                self._sock.sendall(data)
                line = self._rfile.readline(MAX_LINE_BYTES + 1)
                if not line:
                    raise ConnectionError("connection closed by server")
                reply = json.loads(line)
            except (OSError, ConnectionError, ValueError) as exc:
                last = exc
                logger.debug("retry %d of %s msg_id=%d: %s", attempt + 1, kind, msg_id, exc)
                self.close()
                continue
            if not isinstance(reply, dict) or reply.get("msg_id") != msg_id \
                    or reply.get("kind") not in REPLY_KINDS:
                raise ProtocolError(f"unexpected reply {reply!r} to msg_id {msg_id}")
            if reply["kind"] == "ERR":
                raise ServerError(reply["body"].get("error", "error"))
            return reply["body"]
        raise RetriableError(f"{kind} msg_id={msg_id} failed after {self.retries + 1} attempts: {last}")

    def register(self) -> Dict[str, Any]:
        return self.call("REGISTER")

    def get_shard(self) -> Union[Shard, Signal]:
        body = self.call("GET_SHARD")
        if "signal" in body:
            return Signal(body["signal"])
        s = body["shard"]
        return Shard(s["shard_id"], s["start"], s["end"], ShardState.DOING, self.worker, s["epoch"])

    def report_shard(self, shard: Shard, outcome: Outcome = Outcome.SUCCESS) -> None:
        self.call("REPORT_SHARD", {"shard_id": shard.shard_id, "epoch": shard.epoch,
                                   "outcome": outcome.value})

    def heartbeat(self) -> None:
        self.call("HEARTBEAT")

    def query_rank(self) -> Dict[str, Any]:
        return self.call("QUERY_RANK")

    def query_world(self) -> Dict[str, Any]:
        return self.call("QUERY_WORLD")

    def checkpoint(self) -> str:
        return self.call("CHECKPOINT")["snapshot"]

    def restore(self, snapshot: str) -> None:
        self.call("CHECKPOINT", {"restore": snapshot})

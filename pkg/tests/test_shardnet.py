import json
import socket
import threading

import pytest
from hypothesis import given, settings, strategies as st

from elasticplan.sharding import DatasetShardManager, Outcome, Shard, Signal
from elasticplan.shardnet import (MAX_LINE_BYTES, ProtocolError, ServerError, ShardClient,
                                  ShardServer, ShardService, encode, serve)


class Clock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def _service(n=100, size=10, epochs=1, **kw):
    return ShardService(DatasetShardManager(n, size, epochs), **kw)


def _call(svc, msg_id, kind, worker="w0", body=None, **extra):
    msg = {"msg_id": msg_id, "kind": kind, "worker": worker, "body": body or {}, **extra}
    return json.loads(svc.handle_line(encode(msg).rstrip(b"\n")))


# -- service level -----------------------------------------------------------------------

def test_register_then_first_shard_is_zero():
    svc = _service()
    reg = _call(svc, 1, "REGISTER")
    assert reg["kind"] == "ACK" and reg["body"]["rank"] == 0 and reg["msg_id"] == 1
    got = _call(svc, 2, "GET_SHARD")
    assert got["body"]["shard"] == {"shard_id": 0, "start": 0, "end": 10, "epoch": 0}


def test_get_shard_before_register_is_err():
    reply = _call(_service(), 1, "GET_SHARD")
    assert reply["kind"] == "ERR" and "not registered" in reply["body"]["error"]


def test_retried_msg_id_returns_same_shard_single_lease():
    svc = _service()
    _call(svc, 1, "REGISTER")
    a = _call(svc, 2, "GET_SHARD")
    b = _call(svc, 2, "GET_SHARD")
    assert a == b
    assert len(svc.leases) == 1
    assert svc.manager.queues.todo_count == 9


def test_retried_report_applied_once():
    svc = _service()
    _call(svc, 1, "REGISTER")
    s = _call(svc, 2, "GET_SHARD")["body"]["shard"]
    body = {"shard_id": s["shard_id"], "epoch": 0, "outcome": "SUCCESS"}
    assert _call(svc, 3, "REPORT_SHARD", body=body)["kind"] == "ACK"
    assert _call(svc, 3, "REPORT_SHARD", body=body)["kind"] == "ACK"
    assert svc.manager.samples_done() == 10
    # a new msg_id for the same shard is a lease mismatch
    assert _call(svc, 4, "REPORT_SHARD", body=body)["kind"] == "ERR"


def test_report_bad_outcome():
    svc = _service()
    _call(svc, 1, "REGISTER")
    reply = _call(svc, 2, "REPORT_SHARD", body={"shard_id": 0, "epoch": 0, "outcome": "MAYBE"})
    assert reply["kind"] == "ERR" and "outcome" in reply["body"]["error"]


def test_reap_silent_worker_returns_shard_to_todo():
    clock = Clock()
    svc = _service(clock=clock, heartbeat_interval=1.0, max_missed=3)
    _call(svc, 1, "REGISTER", worker="a")
    _call(svc, 1, "REGISTER", worker="b")
    sid = _call(svc, 2, "GET_SHARD", worker="a")["body"]["shard"]["shard_id"]
    clock.t = 2.0
    _call(svc, 3, "HEARTBEAT", worker="b")
    assert svc.reap() == []
    clock.t = 3.5
    assert svc.reap() == ["a"]
    assert svc.manager.queues.todo[0] == sid
    assert not any(k[0] == "a" for k in svc.leases)
    assert _call(svc, 4, "GET_SHARD", worker="b")["body"]["shard"]["shard_id"] == sid


def test_world_epoch_monotonic_and_ranks_dense():
    clock = Clock()
    svc = _service(clock=clock, heartbeat_interval=1.0, max_missed=1)
    epochs = []
    for i, w in enumerate(["a", "b", "c"]):
        _call(svc, 1, "REGISTER", worker=w)
        epochs.append(_call(svc, 2, "QUERY_WORLD", worker=None)["body"]["world_epoch"])
    assert _call(svc, 3, "QUERY_RANK", worker="c")["body"]["rank"] == 2
    clock.t = 5.0
    _call(svc, 4, "HEARTBEAT", worker="a")
    _call(svc, 4, "HEARTBEAT", worker="c")
    svc.reap()
    world = _call(svc, 5, "QUERY_WORLD", worker=None)["body"]
    epochs.append(world["world_epoch"])
    assert epochs == sorted(epochs) and len(set(epochs)) == len(epochs)
    assert sorted(r for _, r in world["members"]) == [0, 1]


def test_checkpoint_restore_clears_leases():
    svc = _service()
    _call(svc, 1, "REGISTER")
    snap = _call(svc, 2, "CHECKPOINT")["body"]["snapshot"]
    _call(svc, 3, "GET_SHARD")
    assert _call(svc, 4, "CHECKPOINT", body={"restore": snap})["body"] == {"restored": True}
    assert svc.leases == {} and svc.manager.queues.todo_count == 10


def test_wrong_job_id_rejected():
    svc = _service(job_id="j1")
    assert _call(svc, 1, "REGISTER", job_id="j2")["kind"] == "ERR"
    assert _call(svc, 1, "REGISTER", job_id="j1")["kind"] == "ACK"


@pytest.mark.parametrize("line,msg_id,position", [
    (b'{"msg_id": 1, "kind": ', None, 22),
    (b'[1, 2]', None, 0),
    (b'{"kind": "REGISTER"}', None, 0),
    (b'{"msg_id": 4, "kind": "NOPE", "worker": "w"}', 4, 14),
    (b'{"msg_id": 5, "kind": "GET_SHARD"}', 5, 0),
    (b'{"msg_id": 6, "kind": "HEARTBEAT", "worker": "w", "body": 3}', 6, 50),
    (b'\xff\xfe', None, 0),
])
def test_malformed_lines_get_err_with_position(line, msg_id, position):
    reply = json.loads(_service().handle_line(line))
    assert reply["kind"] == "ERR" and reply["msg_id"] == msg_id
    assert reply["body"]["position"] == position


def test_oversize_line_rejected_by_service():
    reply = json.loads(_service().handle_line(b"x" * (MAX_LINE_BYTES + 1)))
    assert reply["kind"] == "ERR" and "longer" in reply["body"]["error"]


def _well_formed(raw: bytes) -> dict:
    assert raw.endswith(b"\n") and raw.count(b"\n") == 1
    reply = json.loads(raw)
    assert set(reply) == {"msg_id", "kind", "body"} and reply["kind"] in ("ACK", "ERR")
    assert isinstance(reply["body"], dict)
    return reply


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_random_bytes_always_get_a_reply(line):
    _well_formed(_service().handle_line(line))


_json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.text(max_size=8),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=6), inner, max_size=3),
    max_leaves=8)


@settings(max_examples=300, deadline=None)
@given(st.fixed_dictionaries({}, optional={
    "msg_id": st.integers(-5, 5) | _json_values,
    "kind": st.sampled_from(["REGISTER", "GET_SHARD", "REPORT_SHARD", "HEARTBEAT", "QUERY_RANK",
                             "QUERY_WORLD", "CHECKPOINT", "ACK"]) | _json_values,
    "worker": st.sampled_from(["a", "b"]) | _json_values,
    "body": st.dictionaries(st.sampled_from(["shard_id", "epoch", "outcome", "restore"]),
                            _json_values, max_size=3) | _json_values,
}))
def test_structured_fuzz_keeps_invariants(msg):
    svc = _service()
    svc.handle_line(json.dumps({"msg_id": 0, "kind": "REGISTER", "worker": "a"}).encode())
    reply = _well_formed(svc.handle_line(json.dumps(msg).encode()))
    if reply["kind"] == "ACK":
        assert reply["msg_id"] == msg["msg_id"]
    svc.manager.queues.check_invariants()


# -- over TCP ------------------------------------------------------------------------------

@pytest.fixture
def server():
    srv = serve(DatasetShardManager(2000, 10, 1), heartbeat_interval=30.0)
    yield srv
    srv.stop()


def test_client_round_trip(server):
    with ShardClient(server.address, "w0") as c:
        assert c.register()["rank"] == 0
        s = c.get_shard()
        assert isinstance(s, Shard) and s.shard_id == 0
        c.report_shard(s)
        c.heartbeat()
        assert c.query_rank()["rank"] == 0
        assert c.query_world()["members"] == [["w0", 0]]
        snap = c.checkpoint()
        c.restore(snap)
    assert server.service.manager.samples_done() == 10


def test_client_raises_server_error(server):
    with ShardClient(server.address, "nobody") as c:
        with pytest.raises(ServerError, match="not registered"):
            c.get_shard()


def test_client_rejects_mismatched_reply():
    lsock = socket.socket()
    lsock.bind(("127.0.0.1", 0))
    lsock.listen(1)

    def fake():
        conn, _ = lsock.accept()
        conn.recv(4096)
        conn.sendall(b'{"msg_id": 999, "kind": "ACK", "body": {}}\n')
        conn.close()

    t = threading.Thread(target=fake, daemon=True)
    t.start()
    with ShardClient(lsock.getsockname(), "w", msg_id_start=1) as c:
        with pytest.raises(ProtocolError):
            c.heartbeat()
    t.join(2)
    lsock.close()


def test_server_rejects_oversize_line_and_keeps_connection(server):
    with socket.create_connection(server.address, timeout=5) as s:
        f = s.makefile("rb")
        s.sendall(b"y" * (MAX_LINE_BYTES * 2 + 5) + b"\n")
        reply = _well_formed(f.readline())
        assert reply["kind"] == "ERR" and reply["body"]["position"] == MAX_LINE_BYTES
        s.sendall(encode({"msg_id": 1, "kind": "QUERY_WORLD", "body": {}}))
        assert _well_formed(f.readline())["kind"] == "ACK"


def run_concurrent_clients(address, n_clients=8):
    """Drain the dataset with parallel clients; returns every shard id each one completed."""
    done = {}
    errors = []

    def worker(name):
        try:
            with ShardClient(address, name) as c:
                c.register()
                mine = []
                while True:
                    got = c.get_shard()
                    if got is Signal.EXHAUSTED:
                        break
                    if got is Signal.WAIT:
                        continue
                    mine.append((got.epoch, got.shard_id))
                    c.report_shard(got, Outcome.SUCCESS)
                done[name] = mine
        except Exception as exc:  # surfaced by the caller
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(f"w{i}",)) for i in range(n_clients)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(60)
    return done, errors


def test_concurrent_clients_never_double_lease(server):
    done, errors = run_concurrent_clients(server.address)
    assert errors == []
    every = [s for mine in done.values() for s in mine]
    assert len(every) == len(set(every)) == 200
    assert server.service.manager.samples_per_epoch == [2000]


def test_shard_server_context_manager():
    svc = ShardService(DatasetShardManager(10, 5))
    with ShardServer(svc) as srv:
        with ShardClient(srv.address, "a") as c:
            assert c.register()["world_epoch"] >= 1

import threading
import time

import numpy as np
import pytest

from thallus import messages, rpc
from thallus.bulk import BulkHandle, Permission, Provider
from thallus.columnar import (DataType, Field, Schema, SizeVectors, batch_equals, batch_from_pydict,
                              compute_size_vectors, concat_batches, map_to_segments)
from thallus.engine import execute, open_dataset, write_dataset
from thallus.errors import RemoteError, ShapeMismatch
from thallus.protocol import DoRdmaHandler, ListSink, Mode, Phase, TcfSink, ThallusServer, run_query
from thallus.rpc import Method
from thallus.serde import TransportMetrics, deserialize_batch

from randdata import random_batch, random_schema

SCHEMA = Schema((Field("a", DataType.INT64), Field("s", DataType.UTF8, True)))


def dataset(path, rows=10, block_rows=4):
    data = {"a": list(range(rows)), "s": [None if i % 3 == 0 else f"v{i}" for i in range(rows)]}
    blocks = [batch_from_pydict(SCHEMA, {k: v[i:i + block_rows] for k, v in data.items()})
              for i in range(0, rows, block_rows)]
    write_dataset(path, SCHEMA, blocks)
    return str(path)


def engine_output(path, sql, batch_rows):
    reader = execute(sql, open_dataset(path), batch_rows)
    out = []
    while (b := reader.next()) is not None:
        out.append(b)
    return out


def wait_for(cond, timeout=3.0):
    deadline = time.time() + timeout
    while not cond() and time.time() < deadline:
        time.sleep(0.01)
    return cond()


def assert_clean(server):
    assert wait_for(lambda: len(server.reader_map) == 0 and len(server.registry) == 0 and not server.sessions)


@pytest.fixture(params=[Provider.LOOPBACK, Provider.TCP], ids=["loopback", "tcp"])
def server(request):
    with ThallusServer(provider=request.param, batch_rows=4) as srv:
        yield srv


def init_scan(conn, sql, path, eager=False):
    return messages.decode_init_scan_response(
        conn.call(Method.INIT_SCAN, messages.encode_init_scan(sql, path, eager)))


# -- scripted sessions over a raw connection ---------------------------------------------

def test_iterate_calls_do_rdma_in_order(server, tmp_path):
    path = dataset(tmp_path / "d.tcf", rows=10)
    events, in_flight = [], []
    with rpc.connect(server.address) as conn:
        uuid, schema = init_scan(conn, "SELECT * FROM t", path)
        assert schema == SCHEMA
        sink = ListSink()
        sink.open(schema)
        inner = DoRdmaHandler(schema, sink, TransportMetrics())

        def handler(c, body):
            in_flight.append(1)
            assert len(in_flight) == 1, "do_rdma calls overlap"
            rows, sizes, handle = messages.decode_do_rdma(body)
            assert handle.permission is Permission.READ_ONLY and handle.provider is server.provider
            assert handle.transfer_id in server.registry
            events.append(rows)
            try:
                return inner(c, body)
            finally:
                in_flight.pop()

        conn.register_handler(Method.DO_RDMA, handler)
        count = messages.decode_iterate_response(conn.call(Method.ITERATE, uuid))
        assert count == 3 and events == [4, 4, 2]
        assert len(server.registry) == 0
        expected = engine_output(path, "SELECT * FROM t", 4)
        assert all(batch_equals(a, b) for a, b in zip(sink.batches, expected))
        conn.call(Method.FINALIZE, messages.encode_finalize(uuid))
    assert_clean(server)


def test_empty_result_makes_no_callbacks(server, tmp_path):
    path = dataset(tmp_path / "d.tcf")
    calls = []
    with rpc.connect(server.address) as conn:
        uuid, _ = init_scan(conn, "SELECT a FROM t WHERE a > 100", path)
        conn.register_handler(Method.DO_RDMA, lambda c, b: calls.append(b) or b"\x00")
        assert messages.decode_iterate_response(conn.call(Method.ITERATE, uuid)) == 0
    assert calls == []


def test_unknown_reader_and_finalize_lifecycle(server, tmp_path):
    path = dataset(tmp_path / "d.tcf")
    with rpc.connect(server.address) as conn:
        with pytest.raises(RemoteError) as err:
            conn.call(Method.ITERATE, bytes(16))
        assert err.value.code == 3
        uuid, _ = init_scan(conn, "SELECT * FROM t", path)
        assert conn.call(Method.FINALIZE, messages.encode_finalize(uuid)) == b""
        assert conn.call(Method.FINALIZE, messages.encode_finalize(uuid)) == b""
        assert conn.call(Method.FINALIZE, messages.encode_finalize(bytes(16))) == b""
        for method in (Method.ITERATE, Method.NEXT_BATCH):
            with pytest.raises(RemoteError) as err:
                conn.call(method, uuid)
            assert err.value.code == 3
    assert_clean(server)


def test_init_scan_errors_are_engine_errors(server, tmp_path):
    path = dataset(tmp_path / "d.tcf")
    with rpc.connect(server.address) as conn:
        for sql, p in [("SELEC * FROM t", path), ("SELECT nope FROM t", path),
                       ("SELECT * FROM t", str(tmp_path / "missing.tcf"))]:
            with pytest.raises(RemoteError) as err:
                init_scan(conn, sql, p)
            assert err.value.code == 5
        with pytest.raises(RemoteError) as err:
            init_scan(conn, "SELECT FROM t", path)
        assert "column 8" in err.value.message
        with pytest.raises(RemoteError) as err:
            conn.call(Method.INIT_SCAN, b"\x01")
        assert err.value.code == 2


def test_eager_init_buffers_all_batches(server, tmp_path):
    path = dataset(tmp_path / "d.tcf", rows=12)
    with rpc.connect(server.address) as conn:
        uuid, _ = init_scan(conn, "SELECT * FROM t", path, eager=True)
        reader = server.reader_map.take(uuid)
        assert len(reader.buffered) == 3
        conn.call(Method.FINALIZE, messages.encode_finalize(uuid))


def test_next_batch_stream(server, tmp_path):
    path = dataset(tmp_path / "d.tcf", rows=8)
    with rpc.connect(server.address) as conn:
        uuid, _ = init_scan(conn, "SELECT * FROM t", path)
        got = []
        while (data := messages.decode_next_batch_response(conn.call(Method.NEXT_BATCH, uuid))) is not None:
            got.append(deserialize_batch(bytes(data)))
        assert [b.num_rows for b in got] == [4, 4]
        assert conn.call(Method.NEXT_BATCH, uuid) == b"\x00"
        expected = engine_output(path, "SELECT * FROM t", 4)
        assert all(batch_equals(a, b) for a, b in zip(got, expected))
        with pytest.raises(RemoteError) as err:
            conn.call(Method.ITERATE, uuid)
        assert err.value.code == 2
        metrics = messages.decode_finalize_response(
            conn.call(Method.FINALIZE, messages.encode_finalize(uuid, want_metrics=True)))
        assert metrics["payload_stage_bytes"] == sum(compute_size_vectors(b).total for b in expected)


def test_next_batch_on_bulk_session(server, tmp_path):
    path = dataset(tmp_path / "d.tcf")
    with rpc.connect(server.address) as conn:
        uuid, schema = init_scan(conn, "SELECT * FROM t", path)
        conn.register_handler(Method.DO_RDMA, DoRdmaHandler(schema, ListSink(), TransportMetrics()))
        conn.call(Method.ITERATE, uuid)
        with pytest.raises(RemoteError) as err:
            conn.call(Method.NEXT_BATCH, uuid)
        assert err.value.code == 2
        with pytest.raises(RemoteError) as err:
            conn.call(Method.ITERATE, uuid)
        assert err.value.code == 2


def test_do_rdma_shape_mismatch():
    one_col = Schema((Field("a", DataType.INT64),))
    handler = DoRdmaHandler(one_col, ListSink(), TransportMetrics())
    sizes = SizeVectors((8, 0), (0, 4), (0, 0))
    handle = BulkHandle(bytes(16), Permission.READ_ONLY, [8, 0, 0, 0, 4, 0])
    with pytest.raises(ShapeMismatch):
        handler.handle(1, sizes, handle)
    with pytest.raises(ShapeMismatch):
        handler.handle(1, SizeVectors((8,), (0,), (0,)), BulkHandle(bytes(16), Permission.READ_ONLY, [8, 0, 1]))


def test_do_rdma_shape_error_code_over_the_wire(server, tmp_path):
    path = dataset(tmp_path / "d.tcf")
    with rpc.connect(server.address) as conn:
        uuid, _ = init_scan(conn, "SELECT * FROM t", path)
        wrong = Schema((Field("a", DataType.INT64),))
        codes = []
        inner = DoRdmaHandler(wrong, ListSink(), TransportMetrics())

        def handler(c, body):
            try:
                return inner(c, body)
            except Exception as exc:
                codes.append(rpc.error_code(exc))
                raise

        conn.register_handler(Method.DO_RDMA, handler)
        with pytest.raises(RemoteError) as err:
            conn.call(Method.ITERATE, uuid)
        assert err.value.code == 6 and codes == [4]
        conn.call(Method.FINALIZE, messages.encode_finalize(uuid))
    assert_clean(server)


def test_zero_row_batch_transfer():
    with ThallusServer(provider=Provider.LOOPBACK) as srv:
        sink = ListSink()
        schema = Schema((Field("s", DataType.UTF8, True),))
        handler = DoRdmaHandler(schema, sink, TransportMetrics())
        empty = batch_from_pydict(schema, {"s": []})
        h = srv.registry.expose(map_to_segments(empty), Permission.READ_ONLY)
        handler.handle(0, compute_size_vectors(empty), h)
        srv.registry.release(h)
        assert sink.batches[0].num_rows == 0 and batch_equals(sink.batches[0], empty)


def test_second_iterate_on_same_connection_rejected(server, tmp_path):
    path = dataset(tmp_path / "d.tcf", rows=8)
    results = {}
    with rpc.connect(server.address) as conn:
        u1, schema = init_scan(conn, "SELECT * FROM t", path)
        u2, _ = init_scan(conn, "SELECT * FROM t", path)
        release = threading.Event()
        entered = threading.Event()

        def slow(c, body):
            entered.set()
            release.wait(5)
            return b"\x00"

        conn.register_handler(Method.DO_RDMA, slow)
        t = threading.Thread(target=lambda: results.setdefault("first", conn.call(Method.ITERATE, u1)))
        t.start()
        assert entered.wait(5)
        with pytest.raises(RemoteError) as err:
            conn.call(Method.ITERATE, u2)
        assert err.value.code == 2
        release.set()
        t.join()


# -- fault injection ------------------------------------------------------------------

class FailingSink(ListSink):
    def __init__(self, fail_at):
        super().__init__()
        self.fail_at = fail_at

    def write(self, batch):
        if len(self.batches) == self.fail_at:
            raise RuntimeError("sink failure")
        super().write(batch)


def test_client_failure_mid_iterate_still_finalizes(server, tmp_path):
    path = dataset(tmp_path / "d.tcf", rows=12)
    finals = []
    orig = server.handle_finalize
    server.handle_finalize = lambda uuid: finals.append(uuid) or orig(uuid)
    with pytest.raises(RemoteError) as err:
        run_query(server.address, "SELECT * FROM t", path, Mode.BULK, False, FailingSink(1))
    assert err.value.code == 6
    assert len(finals) == 1
    assert_clean(server)


def test_engine_failure_mid_stream(server, tmp_path):
    path = dataset(tmp_path / "d.tcf", rows=12, block_rows=4)
    with open(path, "r+b") as f:
        f.truncate(f.seek(0, 2) - 5)
    for mode in Mode:
        with pytest.raises(RemoteError) as err:
            run_query(server.address, "SELECT * FROM t", path, mode)
        assert err.value.code == 5
    assert_clean(server)


def test_client_disconnect_mid_iterate_is_swept(server, tmp_path):
    path = dataset(tmp_path / "d.tcf", rows=12)
    conn = rpc.connect(server.address)
    uuid, schema = init_scan(conn, "SELECT * FROM t", path)
    entered = threading.Event()

    def vanish(c, body):
        entered.set()
        c.close()
        raise RuntimeError("gone")

    conn.register_handler(Method.DO_RDMA, vanish)
    t = threading.Thread(target=lambda: pytest.raises(Exception, conn.call, Method.ITERATE, uuid))
    t.start()
    assert entered.wait(5)
    t.join(5)
    assert_clean(server)


def test_server_stop_releases_everything(tmp_path):
    path = dataset(tmp_path / "d.tcf")
    srv = ThallusServer(provider=Provider.TCP)
    conn = rpc.connect(srv.address)
    init_scan(conn, "SELECT * FROM t", path)
    assert len(srv.reader_map) == 1
    srv.stop()
    assert len(srv.reader_map) == 0 and len(srv.registry) == 0
    conn.close()


def test_single_shot_stops_after_finalize(tmp_path):
    path = dataset(tmp_path / "d.tcf")
    srv = ThallusServer(provider=Provider.TCP, single_shot=True)
    run_query(srv.address, "SELECT * FROM t", path)
    assert wait_for(lambda: srv.stopped)


# -- end to end -----------------------------------------------------------------------

@pytest.mark.parametrize("eager", [False, True])
def test_bulk_and_baseline_sinks_equal(server, tmp_path, eager):
    path = dataset(tmp_path / "d.tcf", rows=23, block_rows=5)
    sinks = {m: ListSink() for m in Mode}
    reports = {m: run_query(server.address, "SELECT s, a FROM t WHERE a != 3", path, m, eager, sinks[m])
               for m in Mode}
    expected = engine_output(path, "SELECT s, a FROM t WHERE a != 3", 4)
    total = sum(compute_size_vectors(b).total for b in expected)
    for m in Mode:
        assert batch_equals(sinks[m].combined(), concat_batches(expected[0].schema, expected))
        assert reports[m].batch_count == len(expected) and reports[m].row_count == 22
        assert reports[m].result_bytes == total
    bulk, base = reports[Mode.BULK], reports[Mode.BASELINE]
    assert bulk.metrics["payload_stage_bytes"] == 0 and bulk.server_metrics["payload_stage_bytes"] == 0
    assert bulk.metrics["bulk_pull_bytes"] == total and bulk.metrics["serialize_ns"] == 0
    assert bulk.provider == server.provider.name.lower()
    assert base.server_metrics["payload_stage_bytes"] == total
    assert base.client_metrics["payload_stage_bytes"] == 0
    assert base.metrics["payload_stage_bytes"] == total and base.metrics["bulk_pull_bytes"] == 0
    assert 0 <= base.serialization_fraction < 1 and bulk.serialization_fraction == 0
    assert_clean(server)


def test_tcf_sink_round_trip(server, tmp_path):
    path = dataset(tmp_path / "d.tcf", rows=9)
    out = tmp_path / "out.tcf"
    report = run_query(server.address, "SELECT * FROM t", path, Mode.BULK, False, TcfSink(out))
    blocks = list(open_dataset(out).blocks())
    assert sum(b.num_rows for b in blocks) == report.row_count == 9


def test_concurrent_sessions(server, tmp_path):
    rng = np.random.default_rng(11)
    schema = random_schema(rng)
    path = str(tmp_path / "r.tcf")
    write_dataset(path, schema, [random_batch(rng, schema, 37) for _ in range(4)])
    expected = concat_batches(schema, engine_output(path, "SELECT * FROM t", 4))
    failures = []

    def go(mode):
        try:
            sink = ListSink()
            run_query(server.address, "SELECT * FROM t", path, mode, False, sink)
            if not batch_equals(sink.combined(), expected):
                failures.append(mode)
        except Exception as exc:  # surfaced below
            failures.append(exc)

    threads = [threading.Thread(target=go, args=(Mode.BULK if i % 2 else Mode.BASELINE,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not failures
    assert_clean(server)


def test_session_phases(tmp_path):
    path = dataset(tmp_path / "d.tcf")
    with ThallusServer(provider=Provider.LOOPBACK) as srv:
        uuid, _ = srv.handle_init_scan("SELECT * FROM t", path)
        state = srv.sessions[uuid]
        assert state.phase is Phase.INITIALIZED and state.mode is None
        srv.handle_next_batch(uuid)
        assert state.phase is Phase.ITERATING and state.mode is Mode.BASELINE
        srv.handle_finalize(uuid)
        assert state.phase is Phase.FINALIZED

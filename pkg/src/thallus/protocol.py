"""Session state machines for the two transport modes.

Bulk mode: ``init_scan`` -> ``iterate`` (server calls the client's ``do_rdma``
once per batch; the client pulls the exposed column buffers over the data
plane) -> ``finalize``.

Baseline mode: ``init_scan`` -> ``next_batch`` until empty (each batch is
serialized into the RPC response) -> ``finalize``.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass, field

from . import messages
from .bulk import BulkRegistry, ChannelPool, DataServer, Permission, Provider, pull
from .columnar import (
    RecordBatch,
    Schema,
    assemble_from_buffers,
    compute_size_vectors,
    concat_batches,
    map_to_segments,
)
from .engine import DEFAULT_BATCH_ROWS, ReaderMap, drain, execute, open_dataset, parse_query
from .engine.tcf import TcfWriter
from .errors import (
    BadRequest,
    ConnectionClosed,
    EngineError,
    RemoteError,
    ShapeMismatch,
    ThallusError,
    TransportError,
    UnknownReader,
)
from .rpc import DEFAULT_TIMEOUT, Connection, Method, Reply, RpcServer
from .rpc import connect as rpc_connect
from .serde import METRIC_NAMES, TransportMetrics, deserialize_batch, serialize_batch

log = logging.getLogger(__name__)


class Mode(enum.Enum):
    BULK = "bulk"
    BASELINE = "baseline"


class Phase(enum.Enum):
    INITIALIZED = "initialized"
    ITERATING = "iterating"
    FINALIZED = "finalized"


@dataclass(eq=False)
class SessionState:
    uuid: bytes
    schema: Schema
    eager: bool
    metrics: TransportMetrics = field(default_factory=TransportMetrics)
    mode: Mode | None = None
    phase: Phase = Phase.INITIALIZED
    live_handles: set = field(default_factory=set)
    owner: Connection | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)

    def advance(self, phase: Phase) -> None:
        order = list(Phase)
        if order.index(phase) < order.index(self.phase):
            raise BadRequest(f"session cannot go from {self.phase.value} to {phase.value}")
        self.phase = phase


class ThallusServer:
    """Control-plane server plus (for the tcp provider) its data-plane listener."""

    def __init__(self, listen: str = "127.0.0.1:0", provider=Provider.TCP, data_address: str = "127.0.0.1:0",
                 single_shot: bool = False, batch_rows: int = DEFAULT_BATCH_ROWS,
                 registry: BulkRegistry | None = None, callback_timeout: float | None = DEFAULT_TIMEOUT):
        self.provider = Provider(provider)
        self.single_shot = single_shot
        self.batch_rows = batch_rows
        self.callback_timeout = callback_timeout
        self.reader_map = ReaderMap()
        self.registry = registry if registry is not None else BulkRegistry()
        self.metrics = TransportMetrics()
        self._sessions: dict[bytes, SessionState] = {}
        self._lock = threading.Lock()
        self._stopped = threading.Event()
        self.data_server = DataServer(self.registry, data_address) if self.provider is Provider.TCP else None
        try:
            self.rpc = RpcServer(listen, on_connect=self._on_connect)
        except ThallusError:
            if self.data_server is not None:
                self.data_server.close()
            raise
        self.rpc.register_handler(Method.INIT_SCAN, self._rpc_init_scan)
        self.rpc.register_handler(Method.ITERATE, self._rpc_iterate)
        self.rpc.register_handler(Method.FINALIZE, self._rpc_finalize)
        self.rpc.register_handler(Method.NEXT_BATCH, self._rpc_next_batch)

    @property
    def address(self) -> str:
        return self.rpc.address

    @property
    def data_endpoint(self) -> str | None:
        return None if self.data_server is None else self.data_server.address

    @property
    def sessions(self) -> dict[bytes, SessionState]:
        with self._lock:
            return dict(self._sessions)

    def _on_connect(self, conn: Connection) -> None:
        conn.context["sessions"] = set()
        conn.context["iterate_lock"] = threading.Lock()
        conn.on_close(self._sweep)

    def _sweep(self, conn: Connection) -> None:
        for uuid in list(conn.context.get("sessions", ())):
            log.info("finalizing abandoned session %s", uuid.hex())
            self.handle_finalize(uuid)

    def _session(self, uuid: bytes) -> SessionState:
        with self._lock:
            state = self._sessions.get(uuid)
        if state is None:
            raise UnknownReader(f"unknown reader {uuid.hex()}")
        return state

    # Procedures.

    def handle_init_scan(self, sql: str, dataset_path: str, eager: bool = False,
                         conn: Connection | None = None) -> tuple[bytes, Schema]:
        try:
            query = parse_query(sql)
            reader = execute(query, open_dataset(dataset_path), self.batch_rows)
            if eager:
                reader = drain(reader)
        except ThallusError as exc:
            raise EngineError(str(exc)) from exc
        except OSError as exc:
            raise EngineError(f"cannot read {dataset_path}: {exc}") from exc
        uuid = self.reader_map.insert(reader)
        state = SessionState(uuid, reader.schema, eager, owner=conn)
        with self._lock:
            self._sessions[uuid] = state
        if conn is not None:
            conn.context.setdefault("sessions", set()).add(uuid)
        return uuid, reader.schema

    def handle_iterate(self, uuid: bytes, conn: Connection) -> int:
        state = self._session(uuid)
        with state.lock:
            if state.mode is Mode.BASELINE:
                raise BadRequest("iterate on a baseline-mode session")
            if state.phase is not Phase.INITIALIZED:
                raise BadRequest(f"iterate on a session that is {state.phase.value}")
            state.mode = Mode.BULK
            state.advance(Phase.ITERATING)
        gate = conn.context.setdefault("iterate_lock", threading.Lock())
        if not gate.acquire(blocking=False):
            raise BadRequest("another iterate is in flight on this connection")
        try:
            return self._iterate(state, conn)
        finally:
            gate.release()

    def _iterate(self, state: SessionState, conn: Connection) -> int:
        reader = self.reader_map.take(state.uuid)
        started = time.perf_counter_ns()
        count = 0
        while True:
            batch = reader.next()
            if batch is None:
                break
            sizes = compute_size_vectors(batch)
            handle = self.registry.expose(map_to_segments(batch), Permission.READ_ONLY,
                                          self.provider, self.data_endpoint)
            state.live_handles.add(handle.transfer_id)
            try:
                ack = conn.call(Method.DO_RDMA, messages.encode_do_rdma(batch.num_rows, sizes, handle),
                                timeout=self.callback_timeout)
                if messages.decode_ack(ack) != messages.ACK_OK:
                    raise TransportError(f"client rejected batch {count}")
            except RemoteError as exc:
                raise TransportError(f"do_rdma failed for batch {count}: {exc}") from exc
            except ConnectionClosed as exc:
                raise TransportError(f"client went away during batch {count}") from exc
            finally:
                self.registry.release(handle)
                state.live_handles.discard(handle.transfer_id)
            count += 1
        state.metrics.add(transport_ns=time.perf_counter_ns() - started)
        return count

    def handle_next_batch(self, uuid: bytes):
        """Serialized next batch, or None at end of stream."""
        state = self._session(uuid)
        with state.lock:
            if state.mode is Mode.BULK:
                raise BadRequest("next_batch on a bulk-mode session")
            if state.phase is Phase.FINALIZED:
                raise UnknownReader(f"unknown reader {uuid.hex()}")
            state.mode = Mode.BASELINE
            state.advance(Phase.ITERATING)
            batch = self.reader_map.take(uuid).next()
            if batch is None:
                return None
            return serialize_batch(batch, state.metrics)

    def handle_finalize(self, uuid: bytes) -> dict[str, int]:
        with self._lock:
            state = self._sessions.pop(uuid, None)
        self.reader_map.remove(uuid, missing_ok=True)
        if state is None:
            return dict.fromkeys(METRIC_NAMES, 0)
        self.registry.release_all(list(state.live_handles))
        state.live_handles.clear()
        state.phase = Phase.FINALIZED
        if state.owner is not None:
            state.owner.context.get("sessions", set()).discard(uuid)
        self.metrics.merge(state.metrics)
        return state.metrics.snapshot()

    # Wire adapters.

    def _rpc_init_scan(self, conn: Connection, body) -> bytes:
        sql, path, eager = messages.decode_init_scan(body)
        uuid, schema = self.handle_init_scan(sql, path, eager, conn)
        return messages.encode_init_scan_response(uuid, schema)

    def _rpc_iterate(self, conn: Connection, body) -> bytes:
        return messages.encode_iterate_response(self.handle_iterate(messages.decode_uuid(body), conn))

    def _rpc_next_batch(self, conn: Connection, body):
        data = self.handle_next_batch(messages.decode_uuid(body))
        if data is None:
            return b"\x00"
        return Reply((b"\x01", data))

    def _rpc_finalize(self, conn: Connection, body) -> Reply:
        uuid, want_metrics = messages.decode_finalize(body)
        snapshot = self.handle_finalize(uuid)
        payload = messages.encode_metrics(snapshot) if want_metrics else b""
        return Reply((payload,), self._stop_in_background if self.single_shot else None)

    # Lifecycle.

    def _stop_in_background(self) -> None:
        threading.Thread(target=self.stop, name="thallus-stop", daemon=True).start()

    def stop(self) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        self.rpc.stop()
        if self.data_server is not None:
            self.data_server.close()
        for uuid in list(self.sessions):
            self.handle_finalize(uuid)

    def serve_forever(self, poll: float = 0.2) -> None:
        while not self._stopped.wait(poll):
            pass

    @property
    def stopped(self) -> bool:
        return self._stopped.is_set()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


# Client side.

class ListSink:
    """Collects reassembled batches in memory, in arrival order."""

    def __init__(self):
        self.schema: Schema | None = None
        self.batches: list[RecordBatch] = []

    def open(self, schema: Schema) -> None:
        self.schema = schema

    def write(self, batch: RecordBatch) -> None:
        self.batches.append(batch)

    def close(self) -> None:
        pass

    @property
    def num_rows(self) -> int:
        return sum(b.num_rows for b in self.batches)

    def combined(self) -> RecordBatch:
        return concat_batches(self.schema, self.batches)


class TcfSink:
    """Writes batches to a TCF file as they land."""

    def __init__(self, path):
        self.path = path
        self.num_rows = 0
        self._writer: TcfWriter | None = None

    def open(self, schema: Schema) -> None:
        self._writer = TcfWriter(self.path, schema)

    def write(self, batch: RecordBatch) -> None:
        self._writer.write(batch)
        self.num_rows += batch.num_rows

    def close(self) -> None:
        if self._writer is not None:
            self._writer.close()


class DoRdmaHandler:
    """Client-side ``do_rdma``: allocate, expose write-only, pull, reassemble, sink."""

    def __init__(self, schema: Schema, sink, metrics: TransportMetrics,
                 channels: ChannelPool | None = None, registry: BulkRegistry | None = None):
        self.schema = schema
        self.sink = sink
        self.metrics = metrics
        self.channels = channels or ChannelPool()
        self.registry = registry if registry is not None else BulkRegistry()
        self.batches = 0
        self.rows = 0
        self.result_bytes = 0
        self.providers: set[Provider] = set()
        self.last_landed_ns: int | None = None

    def handle(self, num_rows: int, sizes, remote) -> None:
        if len(sizes) != len(self.schema):
            raise ShapeMismatch(f"size vectors describe {len(sizes)} columns, schema has {len(self.schema)}")
        lengths = sizes.segment_lengths()
        if list(remote.segment_lengths) != lengths:
            raise ShapeMismatch(f"remote handle has segments {list(remote.segment_lengths)}, sizes imply {lengths}")
        buffers = [bytearray(n) for n in lengths]
        local = self.registry.expose(buffers, Permission.WRITE_ONLY)
        try:
            source = None
            if remote.provider is Provider.TCP:
                source = self.channels.get(remote.data_endpoint)
            try:
                pull(remote, buffers, source, self.metrics)
            except TransportError:
                if remote.provider is Provider.TCP:
                    self.channels.discard(remote.data_endpoint)
                raise
        finally:
            self.registry.release(local)
        batch = assemble_from_buffers(self.schema, num_rows, sizes, buffers)
        self.sink.write(batch)
        self.providers.add(remote.provider)
        self.batches += 1
        self.rows += num_rows
        self.result_bytes += sizes.total
        self.last_landed_ns = time.perf_counter_ns()

    def __call__(self, conn: Connection, body) -> bytes:
        num_rows, sizes, remote = messages.decode_do_rdma(body)
        self.handle(num_rows, sizes, remote)
        return messages.encode_ack(messages.ACK_OK)


@dataclass
class SessionReport:
    mode: Mode
    provider: str
    eager: bool
    query: str
    schema: Schema | None
    batch_count: int
    row_count: int
    result_bytes: int
    metrics: dict[str, int]
    client_metrics: dict[str, int]
    server_metrics: dict[str, int] | None

    @property
    def serialization_fraction(self) -> float:
        e2e = self.metrics["e2e_ns"]
        return self.metrics["serialize_ns"] / e2e if e2e else 0.0


def run_query(server_address: str, sql: str, dataset_path: str, mode=Mode.BULK, eager: bool = False,
              sink=None, timeout: float | None = DEFAULT_TIMEOUT) -> SessionReport:
    """Drive one session end to end and report its metrics.

    finalize is always attempted once init_scan has succeeded, even if the
    transfer fails part way.
    """
    mode = Mode(mode)
    sink = sink if sink is not None else ListSink()
    client = TransportMetrics()
    channels = ChannelPool()
    started = time.perf_counter_ns()
    conn = rpc_connect(server_address)
    server_metrics = None
    batch_count = rows = result_bytes = 0
    provider = "none"
    schema = None
    try:
        body = conn.call(Method.INIT_SCAN, messages.encode_init_scan(sql, dataset_path, eager), timeout)
        uuid, schema = messages.decode_init_scan_response(body)
        sink.open(schema)
        failed = True
        try:
            t0 = time.perf_counter_ns()
            if mode is Mode.BULK:
                handler = DoRdmaHandler(schema, sink, client, channels)
                conn.register_handler(Method.DO_RDMA, handler, inline=True)
                reported = messages.decode_iterate_response(conn.call(Method.ITERATE, uuid, timeout))
                end = handler.last_landed_ns or time.perf_counter_ns()
                if reported != handler.batches:
                    raise TransportError(f"server reported {reported} batches, client received {handler.batches}")
                batch_count, rows, result_bytes = handler.batches, handler.rows, handler.result_bytes
                if handler.providers:
                    provider = "/".join(sorted(p.name.lower() for p in handler.providers))
            else:
                end = t0
                while True:
                    data = messages.decode_next_batch_response(conn.call(Method.NEXT_BATCH, uuid, timeout))
                    if data is None:
                        break
                    batch = deserialize_batch(data)
                    sink.write(batch)
                    end = time.perf_counter_ns()
                    batch_count += 1
                    rows += batch.num_rows
                    result_bytes += batch.nbytes
            client.add(transport_ns=end - t0)
            failed = False
        finally:
            try:
                reply = conn.call(Method.FINALIZE, messages.encode_finalize(uuid, want_metrics=True), timeout)
                server_metrics = messages.decode_finalize_response(reply)
            except (RemoteError, ConnectionClosed, TransportError) as exc:
                if not failed:
                    raise
                log.warning("finalize after failure also failed: %s", exc)
    finally:
        conn.close()
        channels.close()
        sink.close()
    client.add(e2e_ns=time.perf_counter_ns() - started)

    merged = client.snapshot()
    if server_metrics:
        merged["payload_stage_bytes"] += server_metrics["payload_stage_bytes"]
        merged["serialize_ns"] += server_metrics["serialize_ns"]
    return SessionReport(mode, provider, eager, sql, schema, batch_count, rows, result_bytes,
                         merged, client.snapshot(), server_metrics)

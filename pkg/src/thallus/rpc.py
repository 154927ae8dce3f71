"""Full-duplex framed RPC over TCP.

Frame header (16 bytes, little-endian)::

    u32 payload_len | u8 kind | u8 flags | u16 reserved | u64 correlation_id

Request payloads start with a one-byte method id. Error payloads are
``u16 code | u16 message_len | message``. Either peer may issue requests on a
connection; while a caller waits for its response, inbound requests keep being
dispatched, which is what lets a server call back into the client mid-request.
"""

from __future__ import annotations

import enum
import itertools
import logging
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

from . import errors, net
from .errors import (
    ConnectionClosed,
    DuplicateHandler,
    FormatError,
    RemoteError,
    RpcTimeout,
    ThallusError,
)

log = logging.getLogger(__name__)

FRAME_HEAD = struct.Struct("<IBBHQ")
ERROR_HEAD = struct.Struct("<HH")
DEFAULT_TIMEOUT = 30.0
MAX_PAYLOAD = 0xFFFFFFFF


class Kind(enum.IntEnum):
    REQUEST = 1
    RESPONSE = 2
    ERROR = 3


class Method(enum.IntEnum):
    INIT_SCAN = 1
    ITERATE = 2
    FINALIZE = 3
    DO_RDMA = 4
    NEXT_BATCH = 5


@dataclass(frozen=True)
class Frame:
    kind: Kind
    correlation_id: int
    payload: bytes = b""
    flags: int = 0
    reserved: int = 0

    def header(self) -> bytes:
        return FRAME_HEAD.pack(len(self.payload), int(self.kind), self.flags, self.reserved, self.correlation_id)

    def encode(self) -> bytes:
        return self.header() + bytes(self.payload)

    @classmethod
    def decode(cls, data) -> "Frame":
        view = memoryview(data).cast("B")
        if len(view) < FRAME_HEAD.size:
            raise FormatError("truncated frame header")
        length, kind, flags, reserved, corr = FRAME_HEAD.unpack_from(view)
        if len(view) != FRAME_HEAD.size + length:
            raise FormatError(f"frame declares {length} payload bytes, has {len(view) - FRAME_HEAD.size}")
        try:
            kind = Kind(kind)
        except ValueError:
            raise FormatError(f"unknown frame kind {kind}") from None
        return cls(kind, corr, bytes(view[FRAME_HEAD.size:]), flags, reserved)


def encode_error(code: int, message: str) -> bytes:
    text = message.encode("utf-8")[:0xFFFF]
    return ERROR_HEAD.pack(code, len(text)) + text


def decode_error(payload) -> RemoteError:
    view = memoryview(payload).cast("B")
    if len(view) < ERROR_HEAD.size:
        return RemoteError(errors.BAD_PAYLOAD, "malformed error frame")
    code, n = ERROR_HEAD.unpack_from(view)
    text = bytes(view[ERROR_HEAD.size: ERROR_HEAD.size + n]).decode("utf-8", "replace")
    return RemoteError(code, text)


def error_code(exc: BaseException) -> int:
    code = getattr(exc, "code", None)
    if isinstance(exc, ThallusError) and isinstance(code, int):
        return code
    if isinstance(exc, (struct.error, UnicodeDecodeError)):
        return errors.BAD_PAYLOAD
    return errors.ENGINE_ERROR


@dataclass
class Reply:
    """Handler result: payload parts sent without joining, plus an after-send hook."""

    parts: tuple = ()
    on_sent: Callable[[], None] | None = None


Handler = Callable[["Connection", memoryview], Any]


class HandlerTable:
    def __init__(self, parent: "HandlerTable | None" = None):
        self._parent = parent
        self._lock = threading.Lock()
        self._handlers: dict[int, tuple[Handler, bool]] = {}

    def register(self, method: int, handler: Handler, inline: bool = False) -> None:
        """Register ``handler`` for ``method``.

        Inline handlers run on the connection's reader thread and must not
        issue calls on the same connection.
        """
        with self._lock:
            if int(method) in self._handlers:
                raise DuplicateHandler(f"method {int(method)} already has a handler")
            self._handlers[int(method)] = (handler, inline)

    def get(self, method: int):
        with self._lock:
            entry = self._handlers.get(method)
        if entry is None and self._parent is not None:
            return self._parent.get(method)
        return entry


@dataclass
class _Pending:
    event: threading.Event = field(default_factory=threading.Event)
    kind: Kind | None = None
    payload: Any = None


class Connection:
    """One duplex framed connection; owns a reader thread and a handler pool."""

    def __init__(self, sock: socket.socket, handlers: HandlerTable | None = None, *,
                 name: str = "rpc", max_workers: int = 8, trace: list | None = None):
        self.sock = sock
        self.name = name
        self.handlers = HandlerTable(handlers)
        self.context: dict[str, Any] = {}
        self.trace = trace
        self._send_lock = threading.Lock()
        self._pending: dict[int, _Pending] = {}
        self._pending_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._closed = threading.Event()
        self._close_callbacks: list[Callable[["Connection"], None]] = []
        self._last_inbound = time.monotonic()
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix=f"{name}-handler")
        self._reader = threading.Thread(target=self._read_loop, name=f"{name}-reader", daemon=True)
        self._reader.start()

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    @property
    def connected(self) -> bool:
        return not self.closed

    def register_handler(self, method: int, handler: Handler, inline: bool = False) -> None:
        self.handlers.register(method, handler, inline)

    def on_close(self, callback: Callable[["Connection"], None]) -> None:
        self._close_callbacks.append(callback)

    # Sending.

    def _send(self, kind: Kind, corr: int, parts) -> None:
        parts = [memoryview(p).cast("B") for p in parts if len(p)]
        length = sum(len(p) for p in parts)
        if length > MAX_PAYLOAD:
            raise errors.CapacityError(f"payload of {length} bytes overflows the frame length field")
        header = FRAME_HEAD.pack(length, int(kind), 0, 0, corr)
        buffers = [memoryview(header)] + parts
        with self._send_lock:
            if self.closed:
                raise ConnectionClosed(f"{self.name}: connection closed")
            if self.trace is not None:
                self.trace.append(b"".join(bytes(b) for b in buffers))
            try:
                net.sendmsg_all(self.sock, buffers)
            except OSError as exc:
                raise ConnectionClosed(f"{self.name}: send failed: {exc}") from exc

    def call(self, method: int, payload=b"", timeout: float | None = DEFAULT_TIMEOUT) -> bytearray:
        """Send a request and wait for its response.

        The timeout restarts whenever the peer sends us a request, so a long
        call that keeps calling back does not expire.
        """
        corr = next(self._ids)
        slot = _Pending()
        started = time.monotonic()
        with self._pending_lock:
            if self.closed:
                raise ConnectionClosed(f"{self.name}: connection closed")
            self._pending[corr] = slot
        try:
            parts = [bytes([int(method)])] + (list(payload) if isinstance(payload, (list, tuple)) else [payload])
            self._send(Kind.REQUEST, corr, parts)
            while not slot.event.wait(0.05 if timeout is None else min(timeout, 0.5)):
                if self.closed:
                    break
                if timeout is not None and time.monotonic() - max(self._last_inbound, started) > timeout:
                    raise RpcTimeout(f"{self.name}: no response to method {int(method)} within {timeout}s")
        finally:
            with self._pending_lock:
                self._pending.pop(corr, None)
        if slot.kind is Kind.RESPONSE:
            return slot.payload
        if slot.kind is Kind.ERROR:
            raise decode_error(slot.payload)
        raise ConnectionClosed(f"{self.name}: connection closed while awaiting method {int(method)}")

    # Receiving.

    def _read_loop(self):
        try:
            while True:
                head = net.recv_exact(self.sock, FRAME_HEAD.size)
                length, kind, _flags, _reserved, corr = FRAME_HEAD.unpack(head)
                payload = net.recv_exact(self.sock, length) if length else bytearray()
                if kind == Kind.REQUEST:
                    self._last_inbound = time.monotonic()
                    self._dispatch(corr, payload)
                elif kind in (Kind.RESPONSE, Kind.ERROR):
                    with self._pending_lock:
                        slot = self._pending.get(corr)
                    if slot is None:
                        log.warning("%s: response for unknown correlation id %d", self.name, corr)
                        continue
                    slot.kind, slot.payload = Kind(kind), payload
                    slot.event.set()
                else:
                    log.warning("%s: dropping frame of unknown kind %d", self.name, kind)
        except (ConnectionClosed, OSError):
            pass
        finally:
            self._shutdown()

    def _dispatch(self, corr: int, payload: bytearray) -> None:
        if not payload:
            self._reply_error(corr, errors.BAD_PAYLOAD, "empty request")
            return
        method = payload[0]
        entry = self.handlers.get(method)
        if entry is None:
            self._reply_error(corr, errors.UNKNOWN_METHOD, "unknown method")
            return
        handler, inline = entry
        body = memoryview(payload)[1:]
        if inline:
            self._run(handler, corr, body)
        else:
            try:
                self._pool.submit(self._run, handler, corr, body)
            except RuntimeError:
                pass

    def _run(self, handler: Handler, corr: int, body: memoryview) -> None:
        try:
            result = handler(self, body)
        except Exception as exc:
            if not isinstance(exc, ThallusError):
                log.exception("%s: handler failed", self.name)
            self._reply_error(corr, error_code(exc), str(exc) or type(exc).__name__)
            return
        reply = result if isinstance(result, Reply) else Reply(
            tuple(result) if isinstance(result, (list, tuple)) else (() if result is None else (result,)))
        try:
            self._send(Kind.RESPONSE, corr, reply.parts)
        except ConnectionClosed:
            return
        if reply.on_sent is not None:
            reply.on_sent()

    def _reply_error(self, corr: int, code: int, message: str) -> None:
        try:
            self._send(Kind.ERROR, corr, [encode_error(code, message)])
        except ConnectionClosed:
            pass

    # Shutdown.

    def _shutdown(self):
        if self._closed.is_set():
            return
        with self._pending_lock:
            self._closed.set()
            pending = list(self._pending.values())
        for slot in pending:
            slot.event.set()
        try:
            self.sock.close()
        except OSError:
            pass
        for callback in self._close_callbacks:
            try:
                callback(self)
            except Exception:
                log.exception("%s: close callback failed", self.name)
        self._pool.shutdown(wait=False)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        if threading.current_thread() is not self._reader:
            self._reader.join(timeout=5)
        self._shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RpcServer:
    """Accepts connections and gives each one the server's handler table."""

    def __init__(self, address: str = "127.0.0.1:0", handlers: HandlerTable | None = None,
                 on_connect: Callable[[Connection], None] | None = None):
        self.handlers = handlers or HandlerTable()
        self.on_connect = on_connect
        self._listener = net.listen(address)
        self.address = net.format_address(self._listener.getsockname())
        self._lock = threading.Lock()
        self._connections: set[Connection] = set()
        self._stopped = threading.Event()
        self._accepter = threading.Thread(target=self._accept_loop, name="rpc-accept", daemon=True)
        self._accepter.start()

    @property
    def connections(self) -> list[Connection]:
        with self._lock:
            return [c for c in self._connections if not c.closed]

    def register_handler(self, method: int, handler: Handler, inline: bool = False) -> None:
        self.handlers.register(method, handler, inline)

    def _accept_loop(self):
        while not self._stopped.is_set():
            try:
                sock, peer = self._listener.accept()
            except OSError:
                break
            net.tune(sock)
            conn = Connection(sock, self.handlers, name=f"server:{net.format_address(peer)}")
            with self._lock:
                self._connections.add(conn)
            conn.on_close(self._forget)
            if self.on_connect is not None:
                self.on_connect(conn)

    def _forget(self, conn: Connection):
        with self._lock:
            self._connections.discard(conn)

    def stop(self) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._listener.close()
        for conn in self.connections:
            conn.close()

    def wait(self, timeout: float | None = None) -> bool:
        return self._stopped.wait(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def listen(address: str, handlers: HandlerTable | None = None) -> RpcServer:
    return RpcServer(address, handlers)


def connect(address: str, handlers: HandlerTable | None = None, **kwargs) -> Connection:
    sock = net.connect(address)
    return Connection(sock, handlers, name=kwargs.pop("name", f"client:{address}"), **kwargs)

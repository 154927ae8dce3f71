"""RDMA-style bulk data plane.

Registering ("exposing") a list of memory segments yields a serializable
:class:`BulkHandle`. A peer holding the handle pulls the segments straight
into its own same-shaped segment list, one-to-one by index. Two providers:

* loopback: the puller copies from the exposing registry in the same process;
* tcp: a dedicated data connection streams each segment directly into its
  destination, never through a whole-transfer staging buffer.

Memory pinning is modelled as registry membership, with an optional
registration delay (``THALLUS_PIN_DELAY_US``).
"""

from __future__ import annotations

import enum
import logging
import os
import socket
import struct
import threading
import time
import uuid as uuidlib
from dataclasses import dataclass
from typing import Sequence

from . import net
from .columnar import as_buffer
from .errors import (
    ConnectionClosed,
    FormatError,
    PermissionDenied,
    ShapeMismatch,
    ThallusError,
    TransportError,
    UnknownHandle,
)
from .serde import TransportMetrics
from .wire import Reader, Writer

log = logging.getLogger(__name__)

PIN_DELAY_ENV = "THALLUS_PIN_DELAY_US"
CHUNK_SIZE = 256 * 1024

# Data-plane response status byte.
STATUS_OK = 0
STATUS_UNKNOWN = 1
STATUS_SHAPE = 2
STATUS_PERMISSION = 3

_REQ_HEAD = struct.Struct("<16sI")


class Permission(enum.IntEnum):
    READ_ONLY = 1
    WRITE_ONLY = 2


class Provider(enum.IntEnum):
    LOOPBACK = 1
    TCP = 2

    @classmethod
    def parse(cls, text: str) -> "Provider":
        return cls[text.strip().upper()]


class Segment:
    """One contiguous byte region; the unit of scatter-gather."""

    __slots__ = ("region",)

    def __init__(self, region):
        self.region = as_buffer(region)

    @property
    def length(self) -> int:
        return len(self.region)

    @property
    def writable(self) -> bool:
        return not self.region.readonly

    def __repr__(self):
        return f"Segment(length={self.length}, writable={self.writable})"


def regions_of(segments: Sequence) -> list[memoryview]:
    """Byte views for a list of Segments or bytes-like objects."""
    out = []
    for s in segments:
        if isinstance(s, Segment):
            out.append(s.region)
        elif type(s) is memoryview and s.format == "B" and s.ndim == 1:
            out.append(s)
        else:
            out.append(as_buffer(s))
    return out


def segments_of(buffers: Sequence) -> list[Segment]:
    return [b if isinstance(b, Segment) else Segment(b) for b in buffers]


@dataclass(frozen=True)
class BulkHandle:
    transfer_id: bytes
    permission: Permission
    segment_lengths: tuple[int, ...]
    provider: Provider = Provider.LOOPBACK
    data_endpoint: str | None = None

    def __post_init__(self):
        if len(self.transfer_id) != 16:
            raise ValueError("transfer_id must be 16 bytes")
        object.__setattr__(self, "permission", Permission(self.permission))
        object.__setattr__(self, "provider", Provider(self.provider))
        object.__setattr__(self, "segment_lengths", tuple(int(n) for n in self.segment_lengths))
        if self.provider is Provider.TCP and not self.data_endpoint:
            raise ValueError("tcp handles need a data endpoint")

    @property
    def total(self) -> int:
        return sum(self.segment_lengths)

    def write(self, w: Writer) -> Writer:
        w.uuid(self.transfer_id).u8(int(self.permission)).u8(int(self.provider))
        w.u64_list(self.segment_lengths)
        if self.provider is Provider.TCP:
            w.short_string(self.data_endpoint)
        return w

    def encode(self) -> bytes:
        return self.write(Writer()).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "BulkHandle":
        tid = r.uuid()
        perm, prov = r.u8(), r.u8()
        lengths = tuple(r.u64_list())
        try:
            provider = Provider(prov)
            permission = Permission(perm)
        except ValueError:
            raise FormatError(f"bad bulk handle enums (permission={perm}, provider={prov})") from None
        endpoint = r.short_string() if provider is Provider.TCP else None
        return cls(tid, permission, lengths, provider, endpoint)

    @classmethod
    def decode(cls, data) -> "BulkHandle":
        r = Reader(data)
        handle = cls.read(r)
        r.expect_end()
        return handle


@dataclass
class _Entry:
    regions: list[memoryview]
    permission: Permission


_loopback_lock = threading.Lock()
_loopback_index: dict[bytes, "BulkRegistry"] = {}


class BulkRegistry:
    """Live exposed segment lists keyed by transfer id."""

    def __init__(self, pin_delay_us: int | None = None):
        if pin_delay_us is None:
            pin_delay_us = int(os.environ.get(PIN_DELAY_ENV, "0") or 0)
        self.pin_delay_us = pin_delay_us
        self._lock = threading.Lock()
        self._entries: dict[bytes, _Entry] = {}

    def __len__(self):
        with self._lock:
            return len(self._entries)

    def __contains__(self, transfer_id):
        with self._lock:
            return transfer_id in self._entries

    def ids(self) -> list[bytes]:
        with self._lock:
            return list(self._entries)

    def expose(self, segments, permission, provider=Provider.LOOPBACK, data_endpoint=None) -> BulkHandle:
        regions = regions_of(segments)
        permission = Permission(permission)
        if permission is Permission.WRITE_ONLY and any(r.readonly for r in regions):
            raise PermissionDenied("write-only exposure needs writable segments")
        if self.pin_delay_us:
            time.sleep(self.pin_delay_us / 1e6)
        tid = uuidlib.uuid4().bytes
        with self._lock:
            self._entries[tid] = _Entry(regions, permission)
        provider = Provider(provider)
        if provider is Provider.LOOPBACK:
            with _loopback_lock:
                _loopback_index[tid] = self
        return BulkHandle(tid, permission, tuple(map(len, regions)), provider, data_endpoint)

    def lookup(self, transfer_id: bytes) -> _Entry:
        with self._lock:
            try:
                return self._entries[transfer_id]
            except KeyError:
                raise UnknownHandle(f"unknown bulk handle {transfer_id.hex()}") from None

    def release(self, handle_or_id) -> None:
        tid = handle_or_id.transfer_id if isinstance(handle_or_id, BulkHandle) else handle_or_id
        with self._lock:
            self._entries.pop(tid, None)
        with _loopback_lock:
            if _loopback_index.get(tid) is self:
                del _loopback_index[tid]

    def release_all(self, transfer_ids=None) -> None:
        for tid in list(self.ids() if transfer_ids is None else transfer_ids):
            self.release(tid)


def expose(segments, permission, registry: BulkRegistry, provider=Provider.LOOPBACK, data_endpoint=None) -> BulkHandle:
    return registry.expose(segments, permission, provider, data_endpoint)


def release(handle: BulkHandle, registry: BulkRegistry) -> None:
    registry.release(handle)


@dataclass(frozen=True)
class PullReport:
    bytes_moved: int
    segments: int


def _check_source(entry: _Entry, lengths: Sequence[int]) -> None:
    if entry.permission is not Permission.READ_ONLY:
        raise PermissionDenied("pull source is not exposed read-only")
    if list(map(len, entry.regions)) != list(lengths):
        raise ShapeMismatch("request shape differs from the exposed segments")


def pull(remote: BulkHandle, local_segments, source=None, metrics: TransportMetrics | None = None) -> PullReport:
    """Scatter-gather pull of every remote segment into the same-index local segment.

    ``source`` is a :class:`BulkRegistry` (loopback), a :class:`DataChannel`
    (tcp), or None to resolve from the handle itself.
    """
    local = regions_of(local_segments)
    if remote.permission is not Permission.READ_ONLY:
        raise PermissionDenied("remote handle must be read-only")
    if len(local) != len(remote.segment_lengths):
        raise ShapeMismatch(f"{len(local)} local segments for {len(remote.segment_lengths)} remote")
    for i, (view, n) in enumerate(zip(local, remote.segment_lengths)):
        if len(view) != n:
            raise ShapeMismatch(f"segment {i}: local {len(view)} bytes, remote {n}")
    if any(view.readonly for view in local):
        raise PermissionDenied("local destination segments must be writable")

    if isinstance(source, DataChannel):
        source.pull(remote.transfer_id, local)
    elif remote.provider is Provider.TCP and source is None:
        with DataChannel(remote.data_endpoint) as channel:
            channel.pull(remote.transfer_id, local)
    else:
        registry = source
        if registry is None:
            with _loopback_lock:
                registry = _loopback_index.get(remote.transfer_id)
            if registry is None:
                raise UnknownHandle(f"unknown bulk handle {remote.transfer_id.hex()}")
        entry = registry.lookup(remote.transfer_id)
        _check_source(entry, remote.segment_lengths)
        for dst, src in zip(local, entry.regions):
            if len(dst):
                dst[:] = src

    total = remote.total
    if metrics is not None:
        metrics.add(bulk_pull_bytes=total)
    return PullReport(total, len(local))


def encode_pull_request(transfer_id: bytes, lengths: Sequence[int]) -> bytes:
    """Data-plane request: transfer id, u32 segment count, u64 expected length per segment."""
    return _REQ_HEAD.pack(transfer_id, len(lengths)) + struct.pack(f"<{len(lengths)}Q", *lengths)


class DataChannel:
    """Client end of the tcp data plane; one request at a time."""

    def __init__(self, endpoint: str, chunk_size: int = CHUNK_SIZE):
        self.endpoint = endpoint
        self.chunk_size = chunk_size
        self._lock = threading.Lock()
        try:
            self._sock = net.connect(endpoint)
        except ThallusError as exc:
            raise TransportError(str(exc)) from exc

    def pull(self, transfer_id: bytes, local: Sequence) -> None:
        local = regions_of(local)
        with self._lock:
            try:
                self._sock.sendall(encode_pull_request(transfer_id, [len(v) for v in local]))
                status = net.recv_exact(self._sock, 1)[0]
                if status == STATUS_UNKNOWN:
                    raise UnknownHandle(f"unknown bulk handle {transfer_id.hex()}")
                if status == STATUS_SHAPE:
                    raise ShapeMismatch("request shape differs from the exposed segments")
                if status == STATUS_PERMISSION:
                    raise PermissionDenied("pull source is not exposed read-only")
                if status != STATUS_OK:
                    raise TransportError(f"data plane status {status}")
                net.recvmsg_into_exact(self._sock, local, self.chunk_size)
            except (OSError, ConnectionClosed) as exc:
                if isinstance(exc, ThallusError) and not isinstance(exc, ConnectionClosed):
                    raise
                self.close()
                raise TransportError(f"data channel to {self.endpoint} failed: {exc}") from exc

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ChannelPool:
    """Lazily opened data channels, one per endpoint."""

    def __init__(self):
        self._lock = threading.Lock()
        self._channels: dict[str, DataChannel] = {}

    def get(self, endpoint: str) -> DataChannel:
        with self._lock:
            channel = self._channels.get(endpoint)
            if channel is None:
                channel = self._channels[endpoint] = DataChannel(endpoint)
            return channel

    def discard(self, endpoint: str) -> None:
        with self._lock:
            channel = self._channels.pop(endpoint, None)
        if channel is not None:
            channel.close()

    def close(self) -> None:
        with self._lock:
            channels, self._channels = list(self._channels.values()), {}
        for channel in channels:
            channel.close()


class DataServer:
    """Serves pulls against a registry over a dedicated tcp listener."""

    def __init__(self, registry: BulkRegistry, address: str = "127.0.0.1:0"):
        self.registry = registry
        self._listener = net.listen(address)
        self.address = net.format_address(self._listener.getsockname())
        self._closed = threading.Event()
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._accept_loop, name="bulk-accept", daemon=True)
        self._thread.start()

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                break
            net.tune(sock)
            with self._lock:
                self._conns.add(sock)
            threading.Thread(target=self._serve, args=(sock,), name="bulk-conn", daemon=True).start()

    def _serve(self, sock: socket.socket):
        try:
            while True:
                try:
                    head = net.recv_exact(sock, _REQ_HEAD.size)
                except ConnectionClosed:
                    return
                tid, count = _REQ_HEAD.unpack(head)
                lengths = struct.unpack(f"<{count}Q", net.recv_exact(sock, 8 * count))
                try:
                    entry = self.registry.lookup(tid)
                    _check_source(entry, lengths)
                except UnknownHandle:
                    sock.sendall(bytes([STATUS_UNKNOWN]))
                    continue
                except ShapeMismatch:
                    sock.sendall(bytes([STATUS_SHAPE]))
                    continue
                except PermissionDenied:
                    sock.sendall(bytes([STATUS_PERMISSION]))
                    continue
                net.sendmsg_all(sock, [bytes([STATUS_OK])] + entry.regions)
        except (OSError, ConnectionClosed) as exc:
            if not self._closed.is_set():
                log.debug("data connection dropped: %s", exc)
        finally:
            with self._lock:
                self._conns.discard(sock)
            sock.close()

    def close(self) -> None:
        self._closed.set()
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._listener.close()
        with self._lock:
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._thread.join(timeout=2)

"""Contiguous batch serialization used by the baseline RPC path and TCF blocks.

Layout, little-endian::

    "TBB1" | u64 num_rows | u32 num_columns
    per column: u8 tag | u8 nullable | u16 name_len | name | u64 data | u64 offsets | u64 validity
    payload: buffers in segment order, each padded to an 8-byte boundary

Serializing copies every payload byte once into the staging buffer and counts
it; deserializing only slices views out of the input.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass, field

from .columnar import (
    DataType,
    Field,
    RecordBatch,
    Schema,
    SizeVectors,
    assemble_from_buffers,
    compute_size_vectors,
    map_to_segments,
)
from .errors import CapacityError, FormatError

MAGIC = b"TBB1"
ALIGN = 8

_HEAD = struct.Struct("<4sQI")
_COL_HEAD = struct.Struct("<BBH")
_SIZES = struct.Struct("<QQQ")

METRIC_NAMES = ("payload_stage_bytes", "bulk_pull_bytes", "serialize_ns", "transport_ns", "e2e_ns")


@dataclass
class TransportMetrics:
    """Thread-safe counters and duration accumulators for one session or peer."""

    payload_stage_bytes: int = 0
    bulk_pull_bytes: int = 0
    serialize_ns: int = 0
    transport_ns: int = 0
    e2e_ns: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, **deltas: int) -> None:
        with self._lock:
            for name, delta in deltas.items():
                if name not in METRIC_NAMES:
                    raise AttributeError(name)
                if delta < 0:
                    raise ValueError(f"{name} is monotone; got delta {delta}")
                setattr(self, name, getattr(self, name) + delta)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {name: getattr(self, name) for name in METRIC_NAMES}

    def merge(self, other: "TransportMetrics") -> None:
        self.add(**other.snapshot())


def _pad(n: int) -> int:
    return (n + ALIGN - 1) & ~(ALIGN - 1)


def _header(batch: RecordBatch, sizes: SizeVectors) -> bytes:
    if batch.num_rows >= 1 << 64 or len(batch.schema) >= 1 << 32:
        raise CapacityError("row or column count overflows its header field")
    parts = [_HEAD.pack(MAGIC, batch.num_rows, len(batch.schema))]
    for f, d, o, v in zip(batch.schema, sizes.data_sizes, sizes.offset_sizes, sizes.null_sizes):
        name = f.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise CapacityError(f"field name of {len(name)} bytes overflows u16")
        parts.append(_COL_HEAD.pack(int(f.dtype), int(f.nullable), len(name)))
        parts.append(name)
        parts.append(_SIZES.pack(d, o, v))
    return b"".join(parts)


def serialized_size(batch: RecordBatch) -> int:
    sizes = compute_size_vectors(batch)
    return len(_header(batch, sizes)) + sum(_pad(n) for n in sizes.segment_lengths())


def serialize_batch(batch: RecordBatch, metrics: TransportMetrics | None = None) -> bytearray:
    """Copy a batch into one contiguous buffer."""
    start = time.perf_counter_ns()
    sizes = compute_size_vectors(batch)
    header = _header(batch, sizes)
    segments = map_to_segments(batch)
    total = len(header) + sum(_pad(len(s)) for s in segments)
    out = bytearray(total)
    out[: len(header)] = header
    pos = len(header)
    copied = 0
    for seg in segments:
        n = len(seg)
        out[pos: pos + n] = seg
        copied += n
        pos += _pad(n)
    if metrics is not None:
        metrics.add(payload_stage_bytes=copied, serialize_ns=time.perf_counter_ns() - start)
    return out


def read_header(data) -> tuple[Schema, int, SizeVectors, int]:
    """Parse a serialized header; returns (schema, num_rows, sizes, header_length)."""
    view = memoryview(data).cast("B")
    if len(view) < _HEAD.size:
        raise FormatError("truncated header")
    magic, num_rows, ncols = _HEAD.unpack_from(view, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}")
    pos = _HEAD.size
    fields, data_sizes, offset_sizes, null_sizes = [], [], [], []
    for _ in range(ncols):
        if pos + _COL_HEAD.size > len(view):
            raise FormatError("truncated column header")
        tag, nullable, name_len = _COL_HEAD.unpack_from(view, pos)
        pos += _COL_HEAD.size
        if pos + name_len + _SIZES.size > len(view):
            raise FormatError("truncated column header")
        try:
            name = bytes(view[pos: pos + name_len]).decode("utf-8")
            fields.append(Field(name, DataType(tag), bool(nullable)))
        except ValueError as exc:
            raise FormatError(f"bad column header: {exc}") from None
        pos += name_len
        d, o, v = _SIZES.unpack_from(view, pos)
        pos += _SIZES.size
        data_sizes.append(d)
        offset_sizes.append(o)
        null_sizes.append(v)
    try:
        schema = Schema(tuple(fields))
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    return schema, num_rows, SizeVectors(data_sizes, offset_sizes, null_sizes), pos


def total_length(data) -> int:
    """Byte length of a serialized batch, derived from its header alone."""
    _, _, sizes, header_len = read_header(data)
    return header_len + sum(_pad(n) for n in sizes.segment_lengths())


def deserialize_batch(data) -> RecordBatch:
    """Rebuild a batch whose buffers are views into ``data`` (no payload copy)."""
    view = memoryview(data).cast("B")
    schema, num_rows, sizes, pos = read_header(view)
    lengths = sizes.segment_lengths()
    expected = pos + sum(_pad(n) for n in lengths)
    if len(view) != expected:
        raise FormatError(f"serialized batch is {len(view)} bytes, header implies {expected}")
    buffers = []
    for n in lengths:
        buffers.append(view[pos: pos + n])
        pos += _pad(n)
    return assemble_from_buffers(schema, num_rows, sizes, buffers)

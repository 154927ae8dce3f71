"""Request and response bodies for each control-plane method.

These are the bodies that follow the method byte of a Request frame (or fill a
Response frame). Every decoder rejects trailing bytes.
"""

from __future__ import annotations

from .bulk import BulkHandle
from .columnar import Schema, SizeVectors
from .errors import FormatError
from .serde import METRIC_NAMES
from .wire import Reader, Writer

ACK_OK = 0


def _finish(r: Reader):
    r.expect_end()


def encode_init_scan(sql: str, dataset_path: str, eager: bool) -> bytes:
    return Writer().string(sql).string(dataset_path).u8(1 if eager else 0).getvalue()


def decode_init_scan(body) -> tuple[str, str, bool]:
    r = Reader(body)
    sql, path, eager = r.string(), r.string(), r.u8()
    _finish(r)
    if eager not in (0, 1):
        raise FormatError(f"bad eager flag {eager}")
    return sql, path, bool(eager)


def encode_init_scan_response(uuid: bytes, schema: Schema) -> bytes:
    return Writer().uuid(uuid).schema(schema).getvalue()


def decode_init_scan_response(body) -> tuple[bytes, Schema]:
    r = Reader(body)
    uuid, schema = r.uuid(), r.schema()
    _finish(r)
    return uuid, schema


def encode_uuid(uuid: bytes) -> bytes:
    return Writer().uuid(uuid).getvalue()


def decode_uuid(body) -> bytes:
    r = Reader(body)
    uuid = r.uuid()
    _finish(r)
    return uuid


def encode_iterate_response(batch_count: int) -> bytes:
    return Writer().u32(batch_count).getvalue()


def decode_iterate_response(body) -> int:
    r = Reader(body)
    n = r.u32()
    _finish(r)
    return n


def encode_do_rdma(num_rows: int, sizes: SizeVectors, handle: BulkHandle) -> bytes:
    w = Writer().u64(num_rows)
    w.u64_list(sizes.data_sizes).u64_list(sizes.offset_sizes).u64_list(sizes.null_sizes)
    return handle.write(w).getvalue()


def decode_do_rdma(body) -> tuple[int, SizeVectors, BulkHandle]:
    r = Reader(body)
    num_rows = r.u64()
    data, offsets, nulls = r.u64_list(), r.u64_list(), r.u64_list()
    if not len(data) == len(offsets) == len(nulls):
        raise FormatError("size vectors have different lengths")
    handle = BulkHandle.read(r)
    _finish(r)
    return num_rows, SizeVectors(data, offsets, nulls), handle


def encode_ack(status: int = ACK_OK) -> bytes:
    return bytes([status])


def decode_ack(body) -> int:
    if len(body) != 1:
        raise FormatError(f"ack must be 1 byte, got {len(body)}")
    return body[0]


def encode_finalize(uuid: bytes, want_metrics: bool = False) -> bytes:
    """A bare UUID, optionally followed by a u8 asking for the server's metrics."""
    w = Writer().uuid(uuid)
    if want_metrics:
        w.u8(1)
    return w.getvalue()


def decode_finalize(body) -> tuple[bytes, bool]:
    r = Reader(body)
    uuid = r.uuid()
    want = bool(r.u8()) if r.remaining else False
    _finish(r)
    return uuid, want


def encode_metrics(snapshot: dict[str, int]) -> bytes:
    w = Writer()
    for name in METRIC_NAMES:
        w.u64(snapshot.get(name, 0))
    return w.getvalue()


def decode_finalize_response(body) -> dict[str, int] | None:
    if len(body) == 0:
        return None
    r = Reader(body)
    out = {name: r.u64() for name in METRIC_NAMES}
    _finish(r)
    return out


def decode_next_batch_response(body) -> memoryview | None:
    """Return the serialized batch bytes, or None at end of stream."""
    view = memoryview(body).cast("B")
    if len(view) == 0:
        raise FormatError("empty next_batch response")
    flag = view[0]
    if flag == 0:
        if len(view) != 1:
            raise FormatError("trailing bytes after has_batch=0")
        return None
    if flag != 1:
        raise FormatError(f"bad has_batch flag {flag}")
    return view[1:]

"""Streaming projection -> filter -> limit execution over a TCF dataset."""

from __future__ import annotations

import collections
import operator
import threading
import uuid as uuidlib
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from ..columnar import (
    Column,
    DataType,
    RecordBatch,
    Schema,
    build_batch,
    offsets_array,
    pack_validity,
    validity_mask,
)
from ..errors import BindError, EngineError, ThallusError, UnknownReader
from .sql import ParsedQuery, parse_query
from .tcf import TcfDataset

DEFAULT_BATCH_ROWS = 8192

INT64_MIN, INT64_MAX = -(1 << 63), (1 << 63) - 1

_OPS = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


@dataclass
class _Rows:
    """One column's rows as numpy arrays; Utf8 offsets always start at 0."""

    dtype: DataType
    values: np.ndarray
    offsets: np.ndarray | None = None
    valid: np.ndarray | None = None

    @classmethod
    def of(cls, dtype: DataType, column: Column, n: int) -> "_Rows":
        valid = validity_mask(column, n)
        if dtype.fixed_width:
            return cls(dtype, np.frombuffer(column.data, dtype=dtype.numpy_dtype), None, valid)
        offs = offsets_array(column).astype(np.int64)
        return cls(dtype, np.frombuffer(column.data, dtype=np.uint8), offs, valid)

    def __len__(self):
        return len(self.values) if self.offsets is None else len(self.offsets) - 1

    def filter(self, mask: np.ndarray) -> "_Rows":
        valid = None if self.valid is None else self.valid[mask]
        if self.offsets is None:
            return _Rows(self.dtype, self.values[mask], None, valid)
        idx = np.flatnonzero(mask)
        starts = self.offsets[idx]
        lengths = self.offsets[idx + 1] - starts
        offs = np.zeros(len(idx) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offs[1:])
        total = int(offs[-1])
        if total:
            gather = np.repeat(starts - offs[:-1], lengths) + np.arange(total, dtype=np.int64)
            data = self.values[gather]
        else:
            data = self.values[:0]
        return _Rows(self.dtype, data, offs, valid)

    def slice(self, start: int, stop: int) -> "_Rows":
        valid = None if self.valid is None else self.valid[start:stop]
        if self.offsets is None:
            return _Rows(self.dtype, self.values[start:stop], None, valid)
        offs = self.offsets[start: stop + 1]
        return _Rows(self.dtype, self.values[offs[0]: offs[-1]], offs - offs[0], valid)

    @classmethod
    def concat(cls, parts: list["_Rows"]) -> "_Rows":
        if len(parts) == 1:
            return parts[0]
        dtype = parts[0].dtype
        valid = None
        if any(p.valid is not None for p in parts):
            valid = np.concatenate([np.ones(len(p), dtype=bool) if p.valid is None else p.valid for p in parts])
        values = np.concatenate([p.values for p in parts])
        if parts[0].offsets is None:
            return cls(dtype, values, None, valid)
        chunks, base = [np.zeros(1, dtype=np.int64)], 0
        for p in parts:
            chunks.append(p.offsets[1:] + base)
            base += int(p.offsets[-1])
        return cls(dtype, values, np.concatenate(chunks), valid)

    def to_column(self) -> Column:
        validity = pack_validity(self.valid)
        if self.offsets is None:
            return Column(np.ascontiguousarray(self.values), b"", validity)
        return Column(np.ascontiguousarray(self.values), self.offsets.astype("<u4"), validity)


def _predicate_mask(rows: _Rows, op: str, literal) -> np.ndarray:
    fn = _OPS[op]
    if rows.offsets is None:
        mask = np.asarray(fn(rows.values, literal), dtype=bool)
        if rows.dtype is DataType.FLOAT64:
            mask &= ~np.isnan(rows.values)
    else:
        raw = rows.values.tobytes()
        offs = rows.offsets.tolist()
        lit = literal.encode("utf-8")
        mask = np.fromiter((fn(raw[offs[i]:offs[i + 1]], lit) for i in range(len(offs) - 1)),
                           dtype=bool, count=len(offs) - 1)
    if rows.valid is not None:
        mask &= rows.valid
    return mask


@dataclass(frozen=True)
class BoundQuery:
    query: ParsedQuery
    input_schema: Schema
    output_schema: Schema
    columns: tuple[int, ...]
    predicate_index: int | None = None
    literal: object = None


def bind(query: ParsedQuery, schema: Schema) -> BoundQuery:
    names = schema.names if query.projection is None else list(query.projection)
    for name in names:
        if name not in schema.names:
            raise BindError(f"unknown column {name!r}")
    if len(set(names)) != len(names):
        raise BindError(f"duplicate column in projection {names}")
    if not names:
        raise BindError("query selects no columns")
    columns = tuple(schema.index(n) for n in names)
    output = Schema(tuple(schema[i] for i in columns))

    pred_index = literal = None
    pred = query.predicate
    if pred is not None:
        if pred.column not in schema.names:
            raise BindError(f"unknown column {pred.column!r}")
        pred_index = schema.index(pred.column)
        dtype = schema[pred_index].dtype
        literal = pred.literal
        if dtype is DataType.INT64:
            if not isinstance(literal, int):
                raise BindError(f"Int64 column {pred.column!r} compared with {type(literal).__name__} literal")
            if not INT64_MIN <= literal <= INT64_MAX:
                raise BindError(f"literal {literal} is outside the Int64 range")
        elif dtype is DataType.FLOAT64:
            if isinstance(literal, str):
                raise BindError(f"Float64 column {pred.column!r} compared with a string literal")
            literal = float(literal)
        elif not isinstance(literal, str):
            raise BindError(f"Utf8 column {pred.column!r} compared with a numeric literal")
    return BoundQuery(query, schema, output, columns, pred_index, literal)


class BatchReader:
    """Single-consumer stream of record batches; end of stream is sticky."""

    def __init__(self, schema: Schema, batches: Iterable[RecordBatch], batch_rows: int = DEFAULT_BATCH_ROWS):
        self.schema = schema
        self.batch_rows = batch_rows
        self._source: Iterator[RecordBatch] | None = iter(batches)

    @property
    def exhausted(self) -> bool:
        return self._source is None

    def next(self) -> RecordBatch | None:
        if self._source is None:
            return None
        try:
            return next(self._source)
        except StopIteration:
            self.close()
            return None
        except EngineError:
            self.close()
            raise
        except (ThallusError, OSError) as exc:
            self.close()
            raise EngineError(f"scan failed: {exc}") from exc

    def __iter__(self):
        return self

    def __next__(self) -> RecordBatch:
        batch = self.next()
        if batch is None:
            raise StopIteration
        return batch

    def close(self) -> None:
        source, self._source = self._source, None
        if source is not None and hasattr(source, "close"):
            source.close()


class BufferedReader(BatchReader):
    """Reader over batches already materialized in memory (eager mode)."""

    def __init__(self, schema: Schema, batches: Iterable[RecordBatch], batch_rows: int = DEFAULT_BATCH_ROWS):
        self.buffered = collections.deque(batches)
        super().__init__(schema, self._drain(), batch_rows)

    def _drain(self):
        while self.buffered:
            yield self.buffered.popleft()


def drain(reader: BatchReader) -> BufferedReader:
    return BufferedReader(reader.schema, list(reader), reader.batch_rows)


def _scan(bound: BoundQuery, ds: TcfDataset, batch_rows: int) -> Iterator[RecordBatch]:
    schema = bound.output_schema
    remaining = bound.query.limit
    if remaining == 0:
        return
    pending: list[list[_Rows]] = []
    pending_rows = 0

    def emit(tables: list[list[_Rows]], n: int) -> tuple[RecordBatch, list[_Rows] | None]:
        merged = [_Rows.concat([t[c] for t in tables]) for c in range(len(schema))]
        head = [r.slice(0, n) for r in merged] if len(merged[0]) > n else merged
        tail = [r.slice(n, len(r)) for r in merged] if len(merged[0]) > n else None
        return build_batch(schema, n, [r.to_column() for r in head]), tail

    for block in ds.blocks():
        n = block.num_rows
        if n == 0:
            continue
        mask = None
        if bound.predicate_index is not None:
            field = bound.input_schema[bound.predicate_index]
            rows = _Rows.of(field.dtype, block.columns[bound.predicate_index], n)
            mask = _predicate_mask(rows, bound.query.predicate.op, bound.literal)
            if mask.all():
                mask = None
        count = n if mask is None else int(mask.sum())
        if count == 0:
            continue
        table = []
        for i in bound.columns:
            rows = _Rows.of(bound.input_schema[i].dtype, block.columns[i], n)
            table.append(rows if mask is None else rows.filter(mask))
        if remaining is not None and count > remaining:
            table = [r.slice(0, remaining) for r in table]
            count = remaining
        pending.append(table)
        pending_rows += count
        if remaining is not None:
            remaining -= count
        while pending_rows >= batch_rows:
            batch, tail = emit(pending, batch_rows)
            pending = [tail] if tail is not None else []
            pending_rows -= batch_rows
            yield batch
        if remaining == 0:
            break
    if pending_rows:
        batch, _ = emit(pending, pending_rows)
        yield batch


def execute(query, ds: TcfDataset, batch_rows: int = DEFAULT_BATCH_ROWS) -> BatchReader:
    """Bind ``query`` against the dataset and return a streaming reader."""
    if batch_rows < 1:
        raise ValueError(f"batch_rows must be >= 1, got {batch_rows}")
    if isinstance(query, str):
        query = parse_query(query)
    bound = bind(query, ds.schema)
    return BatchReader(bound.output_schema, _scan(bound, ds, batch_rows), batch_rows)


class ReaderMap:
    """UUID-keyed registry of live readers, shared by every session of a server."""

    def __init__(self):
        self._lock = threading.Lock()
        self._readers: dict[bytes, BatchReader] = {}

    def __len__(self):
        with self._lock:
            return len(self._readers)

    def __contains__(self, uuid):
        with self._lock:
            return uuid in self._readers

    def insert(self, reader: BatchReader) -> bytes:
        with self._lock:
            while True:
                uuid = uuidlib.uuid4().bytes
                if uuid not in self._readers:
                    self._readers[uuid] = reader
                    return uuid

    def take(self, uuid: bytes) -> BatchReader:
        with self._lock:
            try:
                return self._readers[uuid]
            except KeyError:
                raise UnknownReader(f"unknown reader {bytes(uuid).hex()}") from None

    def remove(self, uuid: bytes, missing_ok: bool = False) -> None:
        with self._lock:
            reader = self._readers.pop(uuid, None)
        if reader is None:
            if not missing_ok:
                raise UnknownReader(f"unknown reader {bytes(uuid).hex()}")
            return
        reader.close()

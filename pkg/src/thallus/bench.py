"""Dataset generator and benchmark drivers.

Every run is reduced to a :class:`RunRecord`, and records are appended to a
CSV file with a fixed header. Durations come from ``time.perf_counter_ns``
(monotonic).
"""

from __future__ import annotations

import contextlib
import csv
import logging
import os
import statistics
import time
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .bulk import Provider
from .columnar import Column, DataType, Field, RecordBatch, Schema, batch_equals, build_batch, pack_validity
from .engine import DEFAULT_BATCH_ROWS, open_dataset
from .engine.tcf import TcfWriter
from .protocol import ListSink, Mode, SessionReport, TcfSink, ThallusServer, run_query

log = logging.getLogger(__name__)

CSV_HEADER = (
    "mode", "provider", "eager", "query", "result_bytes", "batch_count", "serialize_ns",
    "transport_ns", "e2e_ns", "payload_stage_bytes", "bulk_pull_bytes", "serialization_fraction", "speedup",
)

DEFAULT_COLUMNS = "i0:int64,i1:int64,i2:int64,i3:int64,f0:float64,f1:float64,s0:utf8,s1:utf8"
DEFAULT_ROWS = 2_000_000
MAX_STRING_LEN = 16


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    dtype: DataType
    null_density: float | None = None  # None means the field is not nullable

    @property
    def field(self) -> Field:
        return Field(self.name, self.dtype, self.null_density is not None)


@dataclass(frozen=True)
class GenSpec:
    rows: int
    columns: tuple[ColumnSpec, ...]
    seed: int = 0
    batch_rows: int = DEFAULT_BATCH_ROWS

    @property
    def schema(self) -> Schema:
        return Schema(tuple(c.field for c in self.columns))


def parse_columns(text: str) -> tuple[ColumnSpec, ...]:
    """Parse ``name:type[:null_density],...``; giving a density makes the column nullable."""
    specs = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) not in (2, 3) or not parts[0]:
            raise ValueError(f"bad column spec {item!r}; expected name:type[:null_density]")
        density = None
        if len(parts) == 3:
            density = float(parts[2])
            if not 0.0 <= density <= 1.0:
                raise ValueError(f"null density {density} outside [0, 1]")
        specs.append(ColumnSpec(parts[0], DataType.parse(parts[1]), density))
    return tuple(specs)


def _gen_column(rng: np.random.Generator, spec: ColumnSpec, n: int, total_rows: int) -> Column:
    valid = None
    if spec.null_density is not None:
        valid = rng.random(n) >= spec.null_density
    if spec.dtype is DataType.INT64:
        data = rng.integers(0, max(total_rows, 1), n, dtype=np.int64)
    elif spec.dtype is DataType.FLOAT64:
        data = rng.random(n)
    else:
        lengths = rng.integers(1, MAX_STRING_LEN + 1, n, dtype=np.int64)
        if valid is not None:
            lengths[~valid] = 0
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        chars = rng.integers(ord("a"), ord("z") + 1, int(offsets[-1]), dtype=np.uint8)
        return Column(chars, offsets.astype("<u4"), pack_validity(valid))
    if valid is not None:
        data[~valid] = 0
    return Column(data.astype(spec.dtype.numpy_dtype, copy=False), b"", pack_validity(valid))


def generate_batches(spec: GenSpec) -> Iterator[RecordBatch]:
    rng = np.random.default_rng(spec.seed)
    schema = spec.schema
    done = 0
    while done < spec.rows:
        n = min(spec.batch_rows, spec.rows - done)
        cols = [_gen_column(rng, c, n, spec.rows) for c in spec.columns]
        yield build_batch(schema, n, cols)
        done += n


def cmd_gen(spec: GenSpec, out_path) -> str:
    with TcfWriter(out_path, spec.schema) as w:
        for batch in generate_batches(spec):
            w.write(batch)
    return os.fspath(out_path)


@dataclass
class RunRecord:
    mode: str
    provider: str
    eager: bool
    query: str
    result_bytes: int
    batch_count: int
    serialize_ns: int
    transport_ns: int
    e2e_ns: int
    payload_stage_bytes: int
    bulk_pull_bytes: int
    serialization_fraction: float
    speedup: float | None = None
    row_count: int = 0

    @classmethod
    def from_report(cls, report: SessionReport) -> "RunRecord":
        m = report.metrics
        return cls(
            mode=report.mode.value,
            provider=report.provider,
            eager=report.eager,
            query=report.query,
            result_bytes=report.result_bytes,
            batch_count=report.batch_count,
            serialize_ns=m["serialize_ns"],
            transport_ns=m["transport_ns"],
            e2e_ns=m["e2e_ns"],
            payload_stage_bytes=m["payload_stage_bytes"],
            bulk_pull_bytes=m["bulk_pull_bytes"],
            serialization_fraction=report.serialization_fraction,
            row_count=report.row_count,
        )

    def row(self) -> list:
        out = []
        for name in CSV_HEADER:
            value = getattr(self, name)
            if name == "eager":
                value = int(value)
            elif name == "serialization_fraction":
                value = f"{value:.6f}"
            elif name == "speedup":
                value = "" if value is None else f"{value:.4f}"
            out.append(value)
        return out


def append_records(path, records: Sequence[RunRecord]) -> None:
    """Append rows, writing the header only when the file is new or empty."""
    path = os.fspath(path)
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    if not fresh:
        with open(path, newline="") as f:
            header = next(csv.reader(f), None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"{path} has a different CSV header: {header}")
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if fresh:
            w.writerow(CSV_HEADER)
        for rec in records:
            w.writerow(rec.row())


def read_records(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def clock_note() -> str:
    info = time.get_clock_info("perf_counter")
    return f"clock: perf_counter (monotonic={info.monotonic}), resolution {info.resolution * 1e9:.0f} ns"


@contextlib.contextmanager
def server_for(server_addr: str | None, provider=Provider.TCP, batch_rows: int = DEFAULT_BATCH_ROWS):
    """Yield ``server_addr``, or the address of a throwaway in-process server when it is None."""
    if server_addr:
        yield server_addr
        return
    with ThallusServer(provider=provider, batch_rows=batch_rows) as server:
        yield server.address


def cmd_query(server_addr: str | None, sql: str, dataset_path, mode=Mode.BULK, eager: bool = False,
              out_path=None, csv_path=None, provider=Provider.TCP,
              batch_rows: int = DEFAULT_BATCH_ROWS) -> RunRecord:
    sink = TcfSink(out_path) if out_path else ListSink()
    with server_for(server_addr, provider, batch_rows) as address:
        report = run_query(address, sql, os.fspath(dataset_path), Mode(mode), eager, sink)
    record = RunRecord.from_report(report)
    if csv_path:
        append_records(csv_path, [record])
    return record


class _CountingSink(ListSink):
    """Keeps nothing; used for timed repetitions."""

    def write(self, batch):
        pass


def _median_record(records: list[RunRecord]) -> RunRecord:
    first = records[0]
    med = {
        name: int(statistics.median(getattr(r, name) for r in records))
        for name in ("serialize_ns", "transport_ns", "e2e_ns")
    }
    fraction = med["serialize_ns"] / med["e2e_ns"] if med["e2e_ns"] else 0.0
    return RunRecord(first.mode, first.provider, first.eager, first.query, first.result_bytes, first.batch_count,
                     med["serialize_ns"], med["transport_ns"], med["e2e_ns"], first.payload_stage_bytes,
                     first.bulk_pull_bytes, fraction, None, first.row_count)


def _sinks_equal(a: ListSink, b: ListSink) -> bool:
    if len(a.batches) == len(b.batches):
        return all(batch_equals(x, y) for x, y in zip(a.batches, b.batches))
    return batch_equals(a.combined(), b.combined())


def width_query(schema: Schema, width: int) -> str:
    names = schema.names[: max(1, min(width, len(schema)))]
    return f"SELECT {', '.join(names)} FROM t"


def cmd_compare(server_addr: str | None, dataset_path, widths: Sequence[int] = (1, 2, 4, 8), reps: int = 5,
                csv_path=None, provider=Provider.TCP, batch_rows: int = DEFAULT_BATCH_ROWS) -> list[RunRecord]:
    """Column-selectivity sweep: paired eager Baseline/Bulk runs per projection width.

    Each pair carries ``speedup = median baseline transport / median bulk transport``.
    """
    ds = open_dataset(dataset_path)
    if len(ds.schema) < 4:
        raise ValueError(f"compare needs a dataset with at least 4 columns, got {len(ds.schema)}")
    path = os.fspath(dataset_path)
    out: list[RunRecord] = []
    with server_for(server_addr, provider, batch_rows) as address:
        for width in widths:
            sql = width_query(ds.schema, width)
            check = {m: ListSink() for m in Mode}
            runs: dict[Mode, list[RunRecord]] = {m: [] for m in Mode}
            for rep in range(reps):
                order = (Mode.BASELINE, Mode.BULK) if rep % 2 == 0 else (Mode.BULK, Mode.BASELINE)
                for mode in order:
                    sink = check[mode] if rep == 0 else _CountingSink()
                    report = run_query(address, sql, path, mode, eager=True, sink=sink)
                    runs[mode].append(RunRecord.from_report(report))
            if not _sinks_equal(check[Mode.BASELINE], check[Mode.BULK]):
                raise AssertionError(f"bulk and baseline results differ for {sql!r}")
            base, bulk = _median_record(runs[Mode.BASELINE]), _median_record(runs[Mode.BULK])
            if not base.result_bytes == bulk.result_bytes == bulk.bulk_pull_bytes:
                raise AssertionError(f"result byte counts disagree for {sql!r}")
            speedup = base.transport_ns / bulk.transport_ns if bulk.transport_ns else float("inf")
            base.speedup = bulk.speedup = speedup
            log.info("%s: %d bytes, speedup %.2fx", sql, bulk.result_bytes, speedup)
            out += [base, bulk]
    if csv_path:
        append_records(csv_path, out)
    return out

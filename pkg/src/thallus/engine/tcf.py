"""TCF files: ``"TCF1" | schema | { u32 block_len | serialized batch }*``.

Blocks use the baseline serialization format and must embed the file schema.
Datasets are streamed block by block; nothing beyond the header is read at
open time.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator

from ..columnar import RecordBatch, Schema
from ..errors import CapacityError, FormatError, IoError
from ..serde import TransportMetrics, deserialize_batch, serialize_batch
from ..wire import encode_schema

MAGIC = b"TCF1"
_U32 = struct.Struct("<I")


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


def _read_schema(f: BinaryIO) -> bytes:
    """Read the raw schema bytes (rpc encoding) from the current position."""
    head = _read_exact(f, 4, "schema")
    parts = [head]
    for _ in range(_U32.unpack(head)[0]):
        name_len = _read_exact(f, 4, "schema")
        parts.append(name_len)
        parts.append(_read_exact(f, _U32.unpack(name_len)[0] + 2, "schema"))
    return b"".join(parts)


@dataclass(frozen=True)
class TcfDataset:
    path: str
    schema: Schema
    data_offset: int

    def blocks(self) -> Iterator[RecordBatch]:
        """Stream the file's batches in order."""
        try:
            f = open(self.path, "rb")
        except OSError as exc:
            raise IoError(f"cannot open {self.path}: {exc}") from exc
        with f:
            f.seek(self.data_offset)
            while True:
                head = f.read(4)
                if not head:
                    return
                if len(head) != 4:
                    raise FormatError("truncated block length")
                block = _read_exact(f, _U32.unpack(head)[0], "block")
                batch = deserialize_batch(block)
                if batch.schema != self.schema:
                    raise FormatError("block schema differs from the file schema")
                yield batch

    def __iter__(self):
        return self.blocks()

    def read_all(self) -> list[RecordBatch]:
        return list(self.blocks())

    @property
    def num_rows(self) -> int:
        return sum(b.num_rows for b in self.blocks())


def open_dataset(path) -> TcfDataset:
    from ..wire import decode_schema

    path = os.fspath(path)
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    with f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        schema = decode_schema(_read_schema(f))
        return TcfDataset(path, schema, f.tell())


class TcfWriter:
    """Append batches to a new TCF file."""

    def __init__(self, path, schema: Schema):
        self.path = os.fspath(path)
        self.schema = schema
        self.num_rows = 0
        self.num_blocks = 0
        try:
            self._f = open(self.path, "wb")
        except OSError as exc:
            raise IoError(f"cannot create {self.path}: {exc}") from exc
        self._f.write(MAGIC)
        self._f.write(encode_schema(schema))

    def write(self, batch: RecordBatch) -> None:
        if batch.schema != self.schema:
            raise FormatError("batch schema differs from the file schema")
        block = serialize_batch(batch, TransportMetrics())
        if len(block) > 0xFFFFFFFF:
            raise CapacityError(f"block of {len(block)} bytes overflows u32")
        self._f.write(_U32.pack(len(block)))
        self._f.write(block)
        self.num_rows += batch.num_rows
        self.num_blocks += 1

    def close(self) -> None:
        if not self._f.closed:
            self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_dataset(path, schema: Schema, batches) -> str:
    with TcfWriter(path, schema) as w:
        for batch in batches:
            w.write(batch)
    return os.fspath(path)

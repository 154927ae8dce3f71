"""In-memory columnar model.

Every column is three byte buffers: values (``data``), 32-bit little-endian
``offsets`` (variable-width types only) and an LSB-first ``validity`` bitmap.
All three slots always exist; unused ones are zero-length. A record batch maps
onto ``3 * num_columns`` transfer segments, column ``i`` occupying segments
``3i`` (data), ``3i + 1`` (offsets) and ``3i + 2`` (validity).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import LayoutError

FIXED_WIDTH = 8
OFFSET_WIDTH = 4
UINT32_MAX = 0xFFFFFFFF

_EMPTY = memoryview(b"")


class DataType(enum.IntEnum):
    INT64 = 1
    FLOAT64 = 2
    UTF8 = 3

    @property
    def fixed_width(self) -> bool:
        return self is not DataType.UTF8

    @property
    def numpy_dtype(self):
        return {DataType.INT64: np.dtype("<i8"), DataType.FLOAT64: np.dtype("<f8")}[self]

    @classmethod
    def parse(cls, text: str) -> "DataType":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown data type {text!r}") from None


@dataclass(frozen=True)
class Field:
    name: str
    dtype: DataType
    nullable: bool = False

    def __post_init__(self):
        if not self.name:
            raise ValueError("field name must be non-empty")
        object.__setattr__(self, "dtype", DataType(self.dtype))
        object.__setattr__(self, "nullable", bool(self.nullable))


@dataclass(frozen=True)
class Schema:
    fields: tuple[Field, ...]

    def __post_init__(self):
        fields = tuple(self.fields)
        object.__setattr__(self, "fields", fields)
        names = [f.name for f in fields]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate field names in {names}")

    def __len__(self):
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    def __getitem__(self, i):
        return self.fields[i]

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def index(self, name: str) -> int:
        for i, f in enumerate(self.fields):
            if f.name == name:
                return i
        raise KeyError(name)

    def select(self, names: Sequence[str]) -> "Schema":
        return Schema(tuple(self.fields[self.index(n)] for n in names))


def as_buffer(obj) -> memoryview:
    """View any bytes-like object (including numpy arrays) as flat unsigned bytes."""
    if obj is None:
        return _EMPTY
    view = obj if isinstance(obj, memoryview) else memoryview(obj)
    if view.format != "B" or view.ndim != 1:
        view = view.cast("B")
    return view


@dataclass(frozen=True, eq=False)
class Column:
    data: memoryview
    offsets: memoryview = _EMPTY
    validity: memoryview = _EMPTY

    def __post_init__(self):
        for name in ("data", "offsets", "validity"):
            object.__setattr__(self, name, as_buffer(getattr(self, name)))

    @property
    def buffers(self) -> tuple[memoryview, memoryview, memoryview]:
        return (self.data, self.offsets, self.validity)

    @property
    def nbytes(self) -> int:
        return len(self.data) + len(self.offsets) + len(self.validity)


@dataclass(frozen=True, eq=False)
class RecordBatch:
    schema: Schema
    num_rows: int
    columns: tuple[Column, ...]

    @property
    def num_columns(self) -> int:
        return len(self.columns)

    @property
    def nbytes(self) -> int:
        return sum(c.nbytes for c in self.columns)

    def column(self, name: str) -> Column:
        return self.columns[self.schema.index(name)]

    def to_pydict(self) -> dict[str, list]:
        return {
            f.name: column_to_pylist(f.dtype, c, self.num_rows)
            for f, c in zip(self.schema, self.columns)
        }

    def __repr__(self):
        return f"RecordBatch(rows={self.num_rows}, fields={self.schema.names})"


@dataclass(frozen=True)
class SizeVectors:
    data_sizes: tuple[int, ...]
    offset_sizes: tuple[int, ...]
    null_sizes: tuple[int, ...]

    def __post_init__(self):
        for name in ("data_sizes", "offset_sizes", "null_sizes"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not len(self.data_sizes) == len(self.offset_sizes) == len(self.null_sizes):
            raise LayoutError("size vectors have different lengths")

    def __len__(self):
        return len(self.data_sizes)

    @property
    def total(self) -> int:
        return sum(self.data_sizes) + sum(self.offset_sizes) + sum(self.null_sizes)

    def segment_lengths(self) -> list[int]:
        """Interleave the three vectors into per-segment lengths (3i, 3i+1, 3i+2)."""
        out = []
        for triple in zip(self.data_sizes, self.offset_sizes, self.null_sizes):
            out.extend(triple)
        return out


def validity_bytes(num_rows: int) -> int:
    return (num_rows + 7) // 8


def validity_mask(column: Column, num_rows: int) -> np.ndarray | None:
    """Boolean validity per row, or None when every row is valid."""
    if len(column.validity) == 0:
        return None
    bits = np.unpackbits(np.frombuffer(column.validity, dtype=np.uint8), bitorder="little")
    return bits[:num_rows].astype(bool)


def pack_validity(valid: np.ndarray | None) -> bytes:
    """Pack a boolean row mask; an all-valid mask packs to an empty buffer."""
    if valid is None or valid.all():
        return b""
    return np.packbits(valid.astype(np.uint8), bitorder="little").tobytes()


def offsets_array(column: Column) -> np.ndarray:
    return np.frombuffer(column.offsets, dtype="<u4")


def _check_column(field: Field, column: Column, num_rows: int, index: int) -> None:
    if field.dtype.fixed_width:
        expected = FIXED_WIDTH * num_rows
        if len(column.data) != expected:
            raise LayoutError(f"data buffer is {len(column.data)} bytes, expected {expected}", index)
        if len(column.offsets) != 0:
            raise LayoutError("fixed-width column must have an empty offsets buffer", index)
    else:
        expected = OFFSET_WIDTH * (num_rows + 1)
        if len(column.offsets) != expected:
            raise LayoutError(f"offsets buffer is {len(column.offsets)} bytes, expected {expected}", index)
        offs = offsets_array(column)
        if offs[0] != 0:
            raise LayoutError("first offset must be 0", index)
        if num_rows and np.any(offs[1:] < offs[:-1]):
            raise LayoutError("offsets are not monotonically non-decreasing", index)
        if int(offs[-1]) != len(column.data):
            raise LayoutError(f"last offset {int(offs[-1])} != data length {len(column.data)}", index)

    nvalid = len(column.validity)
    if nvalid not in (0, validity_bytes(num_rows)):
        raise LayoutError(f"validity buffer is {nvalid} bytes, expected 0 or {validity_bytes(num_rows)}", index)
    if nvalid and not field.nullable:
        raise LayoutError("non-nullable field carries a validity buffer", index)
    if nvalid and not field.dtype.fixed_width:
        valid = validity_mask(column, num_rows)
        offs = offsets_array(column)
        if np.any((offs[1:] != offs[:-1]) & ~valid):
            raise LayoutError("null Utf8 rows must have zero-length slices", index)


def build_batch(schema: Schema, num_rows: int, columns: Iterable[Column]) -> RecordBatch:
    """Validate and construct a record batch.

    Raises LayoutError naming the first column that breaks an invariant.
    """
    columns = tuple(columns)
    if num_rows < 0:
        raise LayoutError(f"negative row count {num_rows}")
    if len(columns) != len(schema):
        raise LayoutError(f"{len(columns)} columns for a schema of {len(schema)} fields")
    for i, (field, column) in enumerate(zip(schema, columns)):
        _check_column(field, column, num_rows, i)
    return RecordBatch(schema, int(num_rows), columns)


def compute_size_vectors(batch: RecordBatch) -> SizeVectors:
    return SizeVectors(
        tuple(len(c.data) for c in batch.columns),
        tuple(len(c.offsets) for c in batch.columns),
        tuple(len(c.validity) for c in batch.columns),
    )


def map_to_segments(batch: RecordBatch) -> list[memoryview]:
    """Flatten the batch's buffers into segment order; empty buffers are kept."""
    segments = []
    for column in batch.columns:
        segments.extend(column.buffers)
    return segments


def assemble_from_buffers(
    schema: Schema, num_rows: int, sizes: SizeVectors, buffers: Sequence
) -> RecordBatch:
    if len(sizes) != len(schema):
        raise LayoutError(f"size vectors describe {len(sizes)} columns, schema has {len(schema)}")
    if len(buffers) != 3 * len(schema):
        raise LayoutError(f"{len(buffers)} buffers for {len(schema)} columns (need {3 * len(schema)})")
    views = [as_buffer(b) for b in buffers]
    for i, (view, expected) in enumerate(zip(views, sizes.segment_lengths())):
        if len(view) != expected:
            raise LayoutError(f"buffer {i} is {len(view)} bytes, size vector says {expected}", i // 3)
    columns = [Column(*views[3 * i: 3 * i + 3]) for i in range(len(schema))]
    return build_batch(schema, num_rows, columns)


def _bytes(view) -> np.ndarray:
    return np.frombuffer(view, dtype=np.uint8)


def batch_equals(a: RecordBatch, b: RecordBatch) -> bool:
    """Byte equality of two batches, ignoring the value bytes of fixed-width nulls."""
    if a.schema != b.schema or a.num_rows != b.num_rows or len(a.columns) != len(b.columns):
        return False
    n = a.num_rows
    for field, ca, cb in zip(a.schema, a.columns, b.columns):
        if not np.array_equal(_bytes(ca.validity), _bytes(cb.validity)):
            return False
        if not np.array_equal(_bytes(ca.offsets), _bytes(cb.offsets)):
            return False
        if len(ca.data) != len(cb.data):
            return False
        valid = validity_mask(ca, n)
        if field.dtype.fixed_width and valid is not None:
            rows_a = _bytes(ca.data).reshape(n, FIXED_WIDTH)
            rows_b = _bytes(cb.data).reshape(n, FIXED_WIDTH)
            if not np.array_equal(rows_a[valid], rows_b[valid]):
                return False
        elif not np.array_equal(_bytes(ca.data), _bytes(cb.data)):
            return False
    return True


# Construction helpers.

def column_from_values(dtype: DataType, values: Sequence, nullable: bool = True) -> Column:
    """Encode a Python sequence (None for null) into a column."""
    dtype = DataType(dtype)
    valid = np.fromiter((v is not None for v in values), dtype=bool, count=len(values))
    if not nullable and not valid.all():
        raise LayoutError("null value in a non-nullable column")
    if dtype.fixed_width:
        fill = 0 if dtype is DataType.INT64 else 0.0
        data = np.array([fill if v is None else v for v in values], dtype=dtype.numpy_dtype)
        return Column(data.tobytes(), b"", pack_validity(valid))
    encoded = [b"" if v is None else v.encode("utf-8") for v in values]
    offsets = np.zeros(len(values) + 1, dtype="<u8")
    np.cumsum([len(e) for e in encoded], out=offsets[1:])
    if offsets[-1] > UINT32_MAX:
        raise LayoutError("Utf8 data exceeds 32-bit offsets")
    return Column(b"".join(encoded), offsets.astype("<u4").tobytes(), pack_validity(valid))


def column_to_pylist(dtype: DataType, column: Column, num_rows: int) -> list:
    valid = validity_mask(column, num_rows)
    if dtype.fixed_width:
        values = np.frombuffer(column.data, dtype=DataType(dtype).numpy_dtype).tolist()
    else:
        offs = offsets_array(column).tolist()
        raw = bytes(column.data)
        values = [raw[offs[i]:offs[i + 1]].decode("utf-8") for i in range(num_rows)]
    if valid is not None:
        values = [v if ok else None for v, ok in zip(values, valid.tolist())]
    return values


def batch_from_pydict(schema: Schema, data: dict[str, Sequence]) -> RecordBatch:
    lengths = {len(data[f.name]) for f in schema}
    if len(lengths) > 1:
        raise LayoutError(f"columns have different lengths {sorted(lengths)}")
    num_rows = lengths.pop() if lengths else 0
    columns = [column_from_values(f.dtype, data[f.name], f.nullable) for f in schema]
    return build_batch(schema, num_rows, columns)


def empty_batch(schema: Schema) -> RecordBatch:
    return batch_from_pydict(schema, {f.name: [] for f in schema})


def concat_batches(schema: Schema, batches: Sequence[RecordBatch]) -> RecordBatch:
    """Concatenate batches into one; fixed-width null bytes are carried verbatim."""
    batches = list(batches)
    if not batches:
        return empty_batch(schema)
    num_rows = sum(b.num_rows for b in batches)
    columns = []
    for i, field in enumerate(schema):
        parts = [b.columns[i] for b in batches]
        if any(len(p.validity) for p in parts):
            valid = np.concatenate([
                np.ones(b.num_rows, dtype=bool) if len(p.validity) == 0 else validity_mask(p, b.num_rows)
                for b, p in zip(batches, parts)
            ])
            validity = pack_validity(valid)
        else:
            validity = b""
        data = b"".join(bytes(p.data) for p in parts)
        offsets = b""
        if not field.dtype.fixed_width:
            out = [np.zeros(1, dtype=np.uint64)]
            base = 0
            for p in parts:
                offs = offsets_array(p).astype(np.uint64)
                out.append(offs[1:] + base)
                base += len(p.data)
            if base > UINT32_MAX:
                raise LayoutError("Utf8 data exceeds 32-bit offsets", i)
            offsets = np.concatenate(out).astype("<u4").tobytes()
        columns.append(Column(data, offsets, validity))
    return build_batch(schema, num_rows, columns)

"""Columnar result transport over an RPC control plane and an RDMA-style bulk data plane."""

from .bulk import BulkHandle, BulkRegistry, DataServer, Permission, Provider, Segment, expose, pull, release
from .columnar import (
    Column,
    DataType,
    Field,
    RecordBatch,
    Schema,
    SizeVectors,
    assemble_from_buffers,
    batch_equals,
    batch_from_pydict,
    build_batch,
    compute_size_vectors,
    concat_batches,
    map_to_segments,
)
from .protocol import ListSink, Mode, SessionReport, TcfSink, ThallusServer, run_query
from .serde import TransportMetrics, deserialize_batch, serialize_batch

__version__ = "0.1.0"

__all__ = [
    "BulkHandle",
    "BulkRegistry",
    "Column",
    "DataServer",
    "DataType",
    "Field",
    "ListSink",
    "Mode",
    "Permission",
    "Provider",
    "RecordBatch",
    "Schema",
    "Segment",
    "SessionReport",
    "SizeVectors",
    "TcfSink",
    "ThallusServer",
    "TransportMetrics",
    "assemble_from_buffers",
    "batch_equals",
    "batch_from_pydict",
    "build_batch",
    "compute_size_vectors",
    "concat_batches",
    "deserialize_batch",
    "expose",
    "map_to_segments",
    "pull",
    "release",
    "run_query",
    "serialize_batch",
]

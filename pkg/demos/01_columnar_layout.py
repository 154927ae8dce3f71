"""
Columnar batches and their segments
===================================

Every column is three flat buffers: data, offsets and validity.  The
segment list of a batch is just those buffers laid end to end, so column i
owns segments 3i, 3i+1 and 3i+2.
"""

from thallus import DataType, Field, Schema, batch_from_pydict, compute_size_vectors, map_to_segments
from thallus.serde import serialize_batch, deserialize_batch

schema = Schema((Field("id", DataType.INT64, False),
                 Field("score", DataType.FLOAT64, True),
                 Field("tag", DataType.UTF8, True)))
batch = batch_from_pydict(schema, {
    "id": [10, 11, 12, 13],
    "score": [0.5, None, 2.25, 3.0],
    "tag": ["red", "green", None, ""],
})

# fixed-width columns have no offsets; a column without nulls has no validity bytes
sizes = compute_size_vectors(batch)
print("data     ", sizes.data_sizes)
print("offsets  ", sizes.offset_sizes)
print("validity ", sizes.null_sizes)
print("total    ", sizes.total, "bytes")

for i, seg in enumerate(map_to_segments(batch)):
    print(f"segment {i:2d}  column {i // 3}  kind {('data', 'offsets', 'validity')[i % 3]:8s}  {bytes(seg).hex()}")

# the serialized baseline copies the same bytes behind a small header
wire = serialize_batch(batch)
print("serialized size", len(wire), "vs raw", sizes.total)
print(deserialize_batch(wire).to_pydict())

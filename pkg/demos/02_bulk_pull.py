"""
Exposing memory and pulling it
==============================

A producer registers a list of segments read-only and hands out a compact
handle.  A consumer allocates matching buffers and pulls straight into
them.  The same call works for the in-process loopback provider and for the
tcp provider, where bytes travel over a socket with scatter-gather I/O.
"""

from thallus import BulkRegistry, DataServer, Permission, Provider, TransportMetrics, expose, pull, release
from thallus.bulk import BulkHandle, DataChannel

registry = BulkRegistry()
source = [bytearray(b"A" * 5), bytearray(), bytearray(b"B" * 300_000), bytearray(b"C" * 3)]

# loopback: the handle names a registry entry in this process
handle = expose(source, Permission.READ_ONLY, registry, Provider.LOOPBACK)
dest = [bytearray(len(s)) for s in source]
report = pull(handle, dest, None, TransportMetrics())
print("loopback moved", report.bytes_moved, "bytes, identical:", dest == source)
release(handle, registry)

# tcp: the handle also carries the data-plane endpoint
server = DataServer(registry)
handle = expose(source, Permission.READ_ONLY, registry, Provider.TCP, server.address)
wire = handle.encode()
print("handle is", len(wire), "bytes on the wire:", wire.hex())

remote = BulkHandle.decode(wire)
dest = [bytearray(n) for n in remote.segment_lengths]
metrics = TransportMetrics()
with DataChannel(remote.data_endpoint) as channel:
    pull(remote, dest, channel, metrics)
print("tcp identical:", dest == source, "staged bytes:", metrics.payload_stage_bytes)

release(handle, registry)
server.close()
print("registry entries left:", len(registry))

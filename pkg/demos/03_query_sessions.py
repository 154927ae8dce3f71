"""
One query, two transports
=========================

A server owns the dataset and the engine.  In bulk mode it calls back into
the client once per result batch and the client pulls the buffers.  In
baseline mode the client asks for serialized batches one at a time.
"""

import tempfile
from pathlib import Path

from thallus import ListSink, Mode, Provider, ThallusServer, batch_equals, concat_batches, run_query
from thallus import bench

tmp = Path(tempfile.mkdtemp())
spec = bench.GenSpec(200_000, bench.parse_columns("i0:int64,f0:float64:0.1,s0:utf8:0.2"), seed=3)
path = bench.cmd_gen(spec, tmp / "demo.tcf")

sql = "SELECT i0, s0 FROM t WHERE i0 < 50000"

with ThallusServer(provider=Provider.TCP, batch_rows=2048) as server:
    results = {}
    for mode in Mode:
        sink = ListSink()
        report = run_query(server.address, sql, path, mode, eager=True, sink=sink)
        results[mode] = sink.combined()
        print(f"{mode.value:8s} batches={report.batch_count} rows={report.row_count} "
              f"bytes={report.result_bytes} staged(server)={report.server_metrics['payload_stage_bytes']} "
              f"pulled={report.metrics['bulk_pull_bytes']}")

    print("same rows both ways:", batch_equals(results[Mode.BULK], results[Mode.BASELINE]))
    # finalize clears all per-session state on the server
    print("live readers:", len(server.reader_map), "live registrations:", len(server.registry))

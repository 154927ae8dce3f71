"""
Column-selectivity sweep
========================

Project 1, 2, 4 and 8 columns out of a wide table and time the transfer
phase of each transport.  Bulk wins most when batches are large: fewer
round trips and no serialization copy on the server.
"""

import tempfile
from pathlib import Path

from thallus import Provider, bench

tmp = Path(tempfile.mkdtemp())
spec = bench.GenSpec(400_000, bench.parse_columns(bench.DEFAULT_COLUMNS), seed=0)
path = bench.cmd_gen(spec, tmp / "wide.tcf")

print(bench.clock_note())
records = bench.cmd_compare(None, path, widths=(1, 2, 4, 8), reps=3, csv_path=tmp / "sweep.csv",
                            provider=Provider.TCP, batch_rows=131072)
for base, bulk in zip(records[::2], records[1::2]):
    print(f"{bulk.result_bytes / 1e6:7.1f} MB  baseline {base.transport_ns / 1e6:7.1f} ms  "
          f"bulk {bulk.transport_ns / 1e6:7.1f} ms  speedup {bulk.speedup:.2f}x  "
          f"serialization share {base.serialization_fraction:.2f}  {bulk.query}")

print("csv written to", tmp / "sweep.csv")

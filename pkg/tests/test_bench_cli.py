import csv
import os
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from thallus import bench, cli
from thallus.bulk import Provider
from thallus.columnar import DataType, compute_size_vectors, validity_mask
from thallus.engine import open_dataset
from thallus.protocol import ListSink, Mode, ThallusServer, run_query

SMALL_COLS = "i0:int64,i1:int64,f0:float64,s0:utf8:0.2"


def gen(path, rows=500, cols=SMALL_COLS, seed=1, batch_rows=128):
    spec = bench.GenSpec(rows, bench.parse_columns(cols), seed, batch_rows)
    return bench.cmd_gen(spec, path)


def free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_parse_columns():
    specs = bench.parse_columns("a:int64, b:float64:0.5,c:utf8")
    assert [(c.name, c.dtype, c.null_density) for c in specs] == [
        ("a", DataType.INT64, None), ("b", DataType.FLOAT64, 0.5), ("c", DataType.UTF8, None)]
    assert specs[1].field.nullable and not specs[0].field.nullable
    for bad in ("a", "a:int32", "a:int64:2", ":int64"):
        with pytest.raises((ValueError, KeyError)):
            bench.parse_columns(bad)


def test_gen_is_deterministic(tmp_path):
    gen(tmp_path / "a.tcf")
    gen(tmp_path / "b.tcf")
    gen(tmp_path / "c.tcf", seed=2)
    a, b, c = ((tmp_path / n).read_bytes() for n in ("a.tcf", "b.tcf", "c.tcf"))
    assert a == b and a != c


def test_gen_value_ranges(tmp_path):
    gen(tmp_path / "a.tcf", rows=1000)
    ds = open_dataset(tmp_path / "a.tcf")
    assert ds.schema.names == ["i0", "i1", "f0", "s0"]
    for block in ds.blocks():
        d = block.to_pydict()
        assert all(0 <= v < 1000 for v in d["i0"])
        assert all(0.0 <= v < 1.0 for v in d["f0"])
        assert all(v is None or 1 <= len(v) <= 16 for v in d["s0"])


def test_gen_zero_rows(tmp_path):
    gen(tmp_path / "z.tcf", rows=0)
    ds = open_dataset(tmp_path / "z.tcf")
    assert list(ds.blocks()) == [] and len(ds.schema) == 4


def test_gen_all_null_column(tmp_path):
    gen(tmp_path / "n.tcf", rows=20, cols="a:int64:1,s:utf8:1")
    for block in open_dataset(tmp_path / "n.tcf").blocks():
        for col in block.columns:
            assert not validity_mask(col, block.num_rows).any()
            assert set(bytes(col.validity)) == {0}


def test_csv_append_only_with_stable_header(tmp_path):
    rec = bench.RunRecord("bulk", "tcp", True, "SELECT * FROM t", 10, 1, 0, 5, 9, 0, 10, 0.0, 1.5)
    path = tmp_path / "r.csv"
    bench.append_records(path, [rec])
    bench.append_records(path, [rec, rec])
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == ",".join(bench.CSV_HEADER)
    assert lines[0] == ("mode,provider,eager,query,result_bytes,batch_count,serialize_ns,transport_ns,e2e_ns,"
                        "payload_stage_bytes,bulk_pull_bytes,serialization_fraction,speedup")
    assert len(lines) == 4
    rows = bench.read_records(path)
    assert rows[0]["speedup"] == "1.5000" and rows[0]["eager"] == "1"
    other = tmp_path / "other.csv"
    other.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        bench.append_records(other, [rec])


def test_query_records(tmp_path):
    data = gen(tmp_path / "d.tcf")
    csv_path = tmp_path / "q.csv"
    with ThallusServer(provider=Provider.TCP, batch_rows=100) as srv:
        bulk = bench.cmd_query(srv.address, "SELECT * FROM t", data, Mode.BULK, True, tmp_path / "o.tcf", csv_path)
        base = bench.cmd_query(srv.address, "SELECT * FROM t", data, Mode.BASELINE, True, None, csv_path)
        sink = ListSink()
        run_query(srv.address, "SELECT * FROM t", data, Mode.BASELINE, True, sink)
    assert bulk.serialization_fraction == 0 and bulk.serialize_ns == 0
    assert bulk.payload_stage_bytes == 0 and bulk.bulk_pull_bytes == bulk.result_bytes
    assert base.payload_stage_bytes == sum(compute_size_vectors(b).total for b in sink.batches)
    assert 0 < base.serialization_fraction < 1
    assert sum(b.num_rows for b in open_dataset(tmp_path / "o.tcf").blocks()) == bulk.row_count == 500
    assert [r["mode"] for r in bench.read_records(csv_path)] == ["bulk", "baseline"]


def test_compare_pairs(tmp_path):
    data = gen(tmp_path / "d.tcf", rows=2000)
    recs = bench.cmd_compare(None, data, [1, 2, 4], reps=3, csv_path=tmp_path / "c.csv",
                             provider=Provider.LOOPBACK, batch_rows=256)
    assert [r.mode for r in recs] == ["baseline", "bulk"] * 3
    for base, bulk in zip(recs[::2], recs[1::2]):
        assert base.query == bulk.query
        assert base.result_bytes == bulk.result_bytes == bulk.bulk_pull_bytes
        assert base.speedup == bulk.speedup and base.speedup > 0
        assert base.eager and bulk.eager
    assert all(r["speedup"] for r in bench.read_records(tmp_path / "c.csv"))


def test_compare_needs_four_columns(tmp_path):
    data = gen(tmp_path / "d.tcf", cols="a:int64,b:int64")
    with pytest.raises(ValueError):
        bench.cmd_compare(None, data, [1], reps=1)


def test_width_query():
    schema = bench.GenSpec(1, bench.parse_columns(bench.DEFAULT_COLUMNS)).schema
    assert bench.width_query(schema, 2) == "SELECT i0, i1 FROM t"
    assert bench.width_query(schema, 99).count(",") == 7


# -- CLI ------------------------------------------------------------------------------

def test_cli_gen_query_compare(tmp_path, capsys):
    data = str(tmp_path / "d.tcf")
    assert cli.main(["gen", "--rows", "300", "--cols", SMALL_COLS, "--seed", "4", "--batch-rows", "64",
                     "--out", data]) == 0
    assert cli.main(["query", "--sql", "SELECT i0, s0 FROM t WHERE i0 < 100", "--dataset", data, "--mode",
                     "bulk", "--eager", "--out", str(tmp_path / "o.tcf"), "--csv", str(tmp_path / "r.csv"),
                     "--provider", "loopback"]) == 0
    assert cli.main(["compare", "--dataset", data, "--widths", "1,4", "--reps", "1",
                     "--csv", str(tmp_path / "r.csv")]) == 0
    out = capsys.readouterr()
    assert "wrote 300 rows" in out.out and "speedup=" in out.out
    assert "monotonic=True" in out.err
    assert len(bench.read_records(tmp_path / "r.csv")) == 5


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert cli.main(["query", "--sql", "SELECT * FROM t", "--dataset", str(tmp_path / "missing.tcf")]) == 1
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["serve", "--provider", "verbs"])
    with pytest.raises(SystemExit):
        cli.main(["compare", "--dataset", "x", "--widths", "0"])


def _spawn_server(*args):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    return subprocess.Popen([sys.executable, "-m", "thallus", "serve", *args], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True, env=env)


def test_serve_subprocess_single_shot(tmp_path):
    data = gen(tmp_path / "d.tcf")
    port, dport = free_port(), free_port()
    proc = _spawn_server("--listen", f"127.0.0.1:{port}", "--data", f"127.0.0.1:{dport}", "--single-shot")
    try:
        assert "serving" in proc.stdout.readline()
        sink = ListSink()
        report = run_query(f"127.0.0.1:{port}", "SELECT * FROM t", data, Mode.BULK, True, sink)
        assert report.row_count == 500 and report.provider == "tcp"
        assert proc.wait(timeout=10) == 0
    finally:
        proc.kill()


def test_serve_port_collision():
    busy = socket.socket()
    busy.bind(("127.0.0.1", 0))
    busy.listen()
    port = busy.getsockname()[1]
    proc = _spawn_server("--listen", f"127.0.0.1:{port}", "--data", f"127.0.0.1:{free_port()}")
    try:
        assert proc.wait(timeout=20) != 0
        assert "cannot listen" in proc.stderr.read()
    finally:
        proc.kill()
        busy.close()


def test_serve_terminates_on_signal():
    proc = _spawn_server("--listen", "127.0.0.1:0", "--data", "127.0.0.1:0", "--provider", "loopback")
    try:
        assert "provider=loopback" in proc.stdout.readline()
        proc.terminate()
        assert proc.wait(timeout=10) == 0
    finally:
        proc.kill()


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "thallus", "--help"], capture_output=True, text=True, timeout=30)
    assert out.returncode == 0
    for cmd in ("gen", "serve", "query", "compare"):
        assert cmd in out.stdout


def test_clock_note():
    assert "perf_counter" in bench.clock_note()


def test_generate_batches_respects_batch_rows():
    spec = bench.GenSpec(10, bench.parse_columns("a:int64"), 0, 4)
    assert [b.num_rows for b in bench.generate_batches(spec)] == [4, 4, 2]
    assert np.all(np.diff([b.num_rows for b in bench.generate_batches(spec)]) <= 0)

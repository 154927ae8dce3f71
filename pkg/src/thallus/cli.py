"""Command line: ``gen``, ``serve``, ``query`` and ``compare``."""

from __future__ import annotations

import argparse
import logging
import signal
import sys

from . import bench
from .bulk import Provider
from .engine import DEFAULT_BATCH_ROWS, open_dataset
from .errors import ThallusError
from .protocol import Mode, ThallusServer


def _provider(text: str) -> Provider:
    try:
        return Provider.parse(text)
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown provider {text!r}") from None


def _widths(text: str) -> list[int]:
    try:
        widths = [int(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad width list {text!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("widths must be positive integers")
    return widths


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thallus", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a deterministic TCF dataset")
    g.add_argument("--rows", type=int, default=bench.DEFAULT_ROWS)
    g.add_argument("--cols", default=bench.DEFAULT_COLUMNS, metavar="SPEC",
                   help="name:type[:null_density],... (types: int64, float64, utf8)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--batch-rows", type=int, default=DEFAULT_BATCH_ROWS)
    g.add_argument("--out", required=True)

    s = sub.add_parser("serve", help="run a server")
    s.add_argument("--listen", default="127.0.0.1:7400", metavar="H:P")
    s.add_argument("--data", default="127.0.0.1:7401", metavar="H:P")
    s.add_argument("--provider", type=_provider, default=Provider.TCP)
    s.add_argument("--single-shot", action="store_true", help="exit after the first finalize")
    s.add_argument("--batch-rows", type=int, default=DEFAULT_BATCH_ROWS)

    q = sub.add_parser("query", help="run one query session")
    q.add_argument("--server", metavar="H:P", help="omit to use an in-process server")
    q.add_argument("--sql", required=True)
    q.add_argument("--dataset", required=True)
    q.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.BULK.value)
    q.add_argument("--eager", action="store_true")
    q.add_argument("--out")
    q.add_argument("--csv")
    q.add_argument("--provider", type=_provider, default=Provider.TCP, help="in-process server only")
    q.add_argument("--batch-rows", type=int, default=DEFAULT_BATCH_ROWS, help="in-process server only")

    c = sub.add_parser("compare", help="column-selectivity sweep, baseline vs bulk")
    c.add_argument("--server", metavar="H:P", help="omit to use an in-process server")
    c.add_argument("--dataset", required=True)
    c.add_argument("--widths", type=_widths, default=[1, 2, 4, 8])
    c.add_argument("--reps", type=int, default=5)
    c.add_argument("--csv")
    c.add_argument("--provider", type=_provider, default=Provider.TCP, help="in-process server only")
    c.add_argument("--batch-rows", type=int, default=DEFAULT_BATCH_ROWS, help="in-process server only")
    return p


def _print_record(rec: bench.RunRecord) -> None:
    speed = "" if rec.speedup is None else f" speedup={rec.speedup:.2f}x"
    print(f"{rec.mode:8s} {rec.provider:8s} rows={rec.row_count} bytes={rec.result_bytes} "
          f"batches={rec.batch_count} transport={rec.transport_ns / 1e6:.1f}ms e2e={rec.e2e_ns / 1e6:.1f}ms "
          f"serialize={rec.serialize_ns / 1e6:.1f}ms staged={rec.payload_stage_bytes} "
          f"pulled={rec.bulk_pull_bytes} fraction={rec.serialization_fraction:.3f}{speed}  {rec.query}")


def _serve(args) -> int:
    server = ThallusServer(args.listen, args.provider, args.data, args.single_shot, args.batch_rows)

    def stop(signum, frame):
        server.stop()

    # handlers go in before the banner so a supervisor can signal as soon as it reads it
    signal.signal(signal.SIGINT, stop)
    signal.signal(signal.SIGTERM, stop)
    print(f"serving control={server.address} data={server.data_endpoint or '-'} "
          f"provider={args.provider.name.lower()}", flush=True)
    server.serve_forever()
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen":
            spec = bench.GenSpec(args.rows, bench.parse_columns(args.cols), args.seed, args.batch_rows)
            path = bench.cmd_gen(spec, args.out)
            print(f"wrote {args.rows} rows to {path}")
        elif args.command == "serve":
            return _serve(args)
        elif args.command == "query":
            print(bench.clock_note(), file=sys.stderr)
            rec = bench.cmd_query(args.server, args.sql, args.dataset, Mode(args.mode), args.eager,
                                  args.out, args.csv, args.provider, args.batch_rows)
            _print_record(rec)
            if args.out:
                reopened = sum(b.num_rows for b in open_dataset(args.out).blocks())
                if reopened != rec.row_count:
                    print(f"output row count {reopened} != {rec.row_count}", file=sys.stderr)
                    return 1
        elif args.command == "compare":
            print(bench.clock_note(), file=sys.stderr)
            for rec in bench.cmd_compare(args.server, args.dataset, args.widths, args.reps, args.csv,
                                         args.provider, args.batch_rows):
                _print_record(rec)
    except (ThallusError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: watch/record/replay live streams, set
observables, list events, and launch the trainer simulator or the gateway.

Exit codes: 0 ok, 2 request rejected (bad query, readonly, bad file),
3 peer unreachable, 130 interrupted.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from typing import Any, Dict, List, Optional

from . import client as lw
from . import persistence, wire

EXIT_OK = 0
EXIT_REJECTED = 2
EXIT_UNREACHABLE = 3
EXIT_INTERRUPT = 130


def fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


# --- output formatting --------------------------------------------------------


def flatten_numeric(value) -> List:
    """Numeric leaves of a value as (dotted-path, number) pairs, in
    traversal order; a bare scalar gets the path "value". Returns the
    pairs plus a flag saying whether anything non-numeric was dropped."""
    pairs: List = []
    dropped = [False]

    def visit(v, path):
        if isinstance(v, bool):
            dropped[0] = True
        elif isinstance(v, (int, float)):
            pairs.append((path or "value", v))
        elif isinstance(v, list):
            for i, item in enumerate(v):
                visit(item, f"{path}.{i}" if path else str(i))
        elif isinstance(v, dict):
            for k, item in v.items():
                visit(item, f"{path}.{k}" if path else k)
        else:
            dropped[0] = True

    visit(value, "")
    return pairs, dropped[0]


class LinesFormat:
    def __init__(self, dest):
        self.dest = dest

    def item(self, value) -> None:
        self.dest.write(lw.format_value(value) + "\n")
        self.dest.flush()


class CsvFormat:
    """Columns are fixed by the first item; later items fill matching
    columns and leave missing ones blank. Non-numeric leaves are dropped
    with a single warning."""

    def __init__(self, dest):
        self.dest = dest
        self.writer = csv.writer(dest, lineterminator="\n")
        self.columns: Optional[List[str]] = None
        self.warned = False

    def item(self, value) -> None:
        pairs, dropped = flatten_numeric(value)
        if dropped and not self.warned:
            self.warned = True
            print("note: non-numeric leaves omitted", file=sys.stderr)
        if self.columns is None:
            self.columns = [path for path, _ in pairs]
            self.writer.writerow(self.columns)
        row = dict(pairs)
        self.writer.writerow([row.get(c, "") for c in self.columns])
        self.dest.flush()


class TableFormat:
    def __init__(self, dest):
        self.dest = dest
        self.columns: Optional[List[str]] = None
        self.widths: List[int] = []
        self.warned = False

    def item(self, value) -> None:
        pairs, dropped = flatten_numeric(value)
        if dropped and not self.warned:
            self.warned = True
            print("note: non-numeric leaves omitted", file=sys.stderr)
        if self.columns is None:
            self.columns = [path for path, _ in pairs]
            self.widths = [max(len(c), 12) for c in self.columns]
            self.dest.write(
                "  ".join(c.ljust(w) for c, w in zip(self.columns, self.widths))
                + "\n"
            )
        row = dict(pairs)
        cells = []
        for c, w in zip(self.columns, self.widths):
            v = row.get(c, "")
            text = v if isinstance(v, str) else lw.format_value(v)
            cells.append(text.ljust(w))
        self.dest.write("  ".join(cells).rstrip() + "\n")
        self.dest.flush()


_FORMATS = {"lines": LinesFormat, "csv": CsvFormat, "table": TableFormat}


def make_format(name: str, dest):
    return _FORMATS[name](dest)


def parse_cli_value(text: str):
    """One canonical-encoded scalar (JSON literal; "NaN"/"Inf" strings
    decode to floats, other strings must be quoted)."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"not a canonical value: {e.msg}") from e
    return wire.decode_value(raw)


# --- stream consumption -------------------------------------------------------


def consume(handle, fmt) -> int:
    lost = False
    for msg in handle:
        kind = msg["kind"]
        if kind == "item":
            fmt.item(msg.get("value"))
        elif kind == "error":
            if msg.get("value") == "connection lost":
                lost = True
            fail(f"stream: {msg.get('value')}")
        elif kind == "dropped":
            print(f"note: dropped {msg.get('count')} items", file=sys.stderr)
    return EXIT_UNREACHABLE if lost else EXIT_OK


def cmd_watch(args, record_path=None) -> int:
    try:
        session = lw.open_session(args.connect)
    except (lw.ConnectRefused, lw.ProtocolMismatch) as e:
        fail(str(e))
        return EXIT_UNREACHABLE
    out_file = None
    recorder = None
    try:
        try:
            handle = session.create_stream(args.event, args.query,
                                           window=args.window)
        except lw.AgentError as e:
            fail(f"{e.code}: {e.message}" if e.message else e.code)
            return EXIT_REJECTED
        except lw.ClientError as e:
            fail(str(e))
            return EXIT_UNREACHABLE
        dest = sys.stdout
        out_arg = getattr(args, "out", None)
        # "-" is the usual spelling for stdout; only real paths get opened
        if out_arg and out_arg != "-" and record_path is None:
            out_file = open(args.out, "w", encoding="utf-8")
            dest = out_file
        if record_path is not None:
            recorder = persistence.record(handle, record_path)
        return consume(handle, make_format(args.format, dest))
    finally:
        if recorder is not None:
            recorder.close()
        if out_file is not None:
            out_file.close()
        session.close()


def cmd_record(args) -> int:
    return cmd_watch(args, record_path=args.out)


def cmd_replay(args) -> int:
    try:
        speed = "max" if args.speed == "max" else float(args.speed)
    except ValueError:
        fail(f"bad speed: {args.speed!r}")
        return EXIT_REJECTED
    fmt = make_format(args.format, sys.stdout)
    try:
        for msg in persistence.replay(args.path, speed):
            kind = msg["kind"]
            if kind == "item":
                fmt.item(msg.get("value"))
            elif kind == "error":
                fail(f"stream: {msg.get('value')}")
            elif kind == "dropped":
                print(f"note: dropped {msg.get('count')} items", file=sys.stderr)
    except OSError as e:
        fail(str(e))
        return EXIT_REJECTED
    except (persistence.MalformedHeader, persistence.MalformedLine, ValueError) as e:
        fail(str(e))
        return EXIT_REJECTED
    return EXIT_OK


def cmd_set(args) -> int:
    try:
        value = parse_cli_value(args.value)
    except ValueError as e:
        fail(str(e))
        return EXIT_REJECTED
    try:
        session = lw.open_session(args.connect)
    except (lw.ConnectRefused, lw.ProtocolMismatch) as e:
        fail(str(e))
        return EXIT_UNREACHABLE
    try:
        session.set_observable(args.name, value, at_event=args.at_event)
    except lw.AgentError as e:
        fail(f"{e.code}: {e.message}" if e.message else e.code)
        return EXIT_REJECTED
    except lw.ClientError as e:
        fail(str(e))
        return EXIT_UNREACHABLE
    finally:
        session.close()
    print("ok")
    return EXIT_OK


def cmd_events(args) -> int:
    try:
        session = lw.open_session(args.connect)
    except (lw.ConnectRefused, lw.ProtocolMismatch) as e:
        fail(str(e))
        return EXIT_UNREACHABLE
    try:
        events, observables = session.list_events()
    except lw.ClientError as e:
        fail(str(e))
        return EXIT_UNREACHABLE
    finally:
        session.close()
    for name in events:
        print(f"event {name}")
    for name in observables:
        print(f"observable {name}")
    return EXIT_OK


def cmd_sim(args) -> int:
    from .agent import Agent
    from .trainer import ConfigError, TrainerConfig, run, validate

    config = TrainerConfig(
        seed=args.seed,
        epochs=args.epochs,
        batches_per_epoch=args.batches_per_epoch,
        batch_size=args.batch_size,
        layer_sizes=tuple(args.layer_sizes),
        learning_rate=args.learning_rate,
    )
    try:
        validate(config)
    except ConfigError as e:
        fail(str(e))
        return EXIT_REJECTED
    agent = Agent(control_port=args.control_port, data_port=args.data_port,
                  events=("batch", "epoch"))
    try:
        agent.start()
        print(f"LIVEWATCH listening control={agent.control_port} "
              f"data={agent.data_port}", flush=True)
        summary = run(config, agent)
    finally:
        agent.stop()
    print("done " + lw.format_value(summary), flush=True)
    return EXIT_OK


def cmd_gateway(args) -> int:
    from . import gateway

    try:
        gateway.serve(args.host, args.port, agents=args.agent)
    except OSError as e:
        fail(str(e))
        return EXIT_UNREACHABLE
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------


def _add_connect(p) -> None:
    p.add_argument("--connect", required=True, metavar="HOST:PORT",
                   help="agent control address")


def _add_stream_args(p) -> None:
    _add_connect(p)
    p.add_argument("--event", required=True, help="event name to attach to")
    p.add_argument("--query", required=True, help="map-reduce pipeline text")
    p.add_argument("--window", help="group | count=N | seconds=T")
    p.add_argument("--format", choices=sorted(_FORMATS), default="lines")


def _layer_sizes(text: str) -> List[int]:
    try:
        sizes = [int(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("layer sizes must be comma-separated ints")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="livewatch",
        description="watch, record, and steer live metric streams",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("watch", help="print a live stream")
    _add_stream_args(p)
    p.add_argument("--out", help="write formatted output to a file ('-' = stdout)")
    p.set_defaults(fn=cmd_watch)

    p = sub.add_parser("record", help="record a live stream to a file")
    _add_stream_args(p)
    p.add_argument("--out", required=True, help="stream file path")
    p.set_defaults(fn=cmd_record)

    p = sub.add_parser("replay", help="print a recorded stream file")
    p.add_argument("path")
    p.add_argument("--speed", default="1", help="rate multiplier or max")
    p.add_argument("--format", choices=sorted(_FORMATS), default="lines")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("set", help="set a writable observable")
    _add_connect(p)
    p.add_argument("--name", required=True)
    p.add_argument("--value", required=True,
                   help="canonical-encoded scalar, e.g. 0.001 or true")
    p.add_argument("--at-event", help="apply at the next event of this name")
    p.set_defaults(fn=cmd_set)

    p = sub.add_parser("events", help="list events and observables")
    _add_connect(p)
    p.set_defaults(fn=cmd_events)

    p = sub.add_parser("sim", help="run the training simulator host")
    p.add_argument("kind", choices=("trainer",))
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batches-per-epoch", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--layer-sizes", type=_layer_sizes, default=[8, 16, 1])
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--control-port", type=int)
    p.add_argument("--data-port", type=int)
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("gateway", help="run the browser gateway service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8800)
    p.add_argument("--agent", action="append", default=[],
                   metavar="HOST:PORT", help="agent to bridge (repeatable)")
    p.set_defaults(fn=cmd_gateway)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        return EXIT_INTERRUPT


def entrypoint() -> None:
    sys.exit(main())

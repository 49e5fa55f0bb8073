"""Stream files: record a live stream to disk, replay a file as a stream.

File format (".twstream", UTF-8, "\\n" line endings): the first line is a
header object {format, version, event, query, created}; every following line
is one data message in canonical wire encoding minus the "stream" field.
Each line is flushed as written, so a file truncated at any line boundary
is still valid. A trailing partial line (no newline) is ignored on replay.
"""

from __future__ import annotations

import json
import os
import time
from typing import Any, Dict, Iterator, Optional, Union

from . import wire

FORMAT_NAME = "twstream"
FORMAT_VERSION = 1

Message = Dict[str, Any]
Speed = Union[float, int, str]


class PersistenceError(Exception):
    pass


class MalformedHeader(PersistenceError):
    pass


class MalformedLine(PersistenceError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class Recorder:
    """A sink that appends every delivered message to a stream file.

    The header is written (and the file truncated) at construction; each
    message becomes one flushed line. Write failures propagate so the
    owning handle detaches the recorder like any failing sink.
    """

    def __init__(self, path: Union[str, os.PathLike], event: str, query: str,
                 created: Optional[float] = None):
        self.path = os.fspath(path)
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "event": event,
            "query": query,
            "created": time.time() if created is None else created,
        }
        self._file = open(self.path, "w", encoding="utf-8", newline="")
        self._file.write(json.dumps(header, separators=(",", ":"),
                                    ensure_ascii=False) + "\n")
        self._file.flush()
        self.lines_written = 0

    def __call__(self, msg: Message) -> None:
        body = {k: v for k, v in msg.items() if k != "stream"}
        self._file.write(wire.encode(body).decode("utf-8"))
        self._file.flush()
        self.lines_written += 1

    def close(self) -> None:
        try:
            self._file.close()
        except OSError:
            pass

    def __enter__(self) -> "Recorder":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def record(handle, path: Union[str, os.PathLike]) -> Recorder:
    """Attach a Recorder to a stream handle; returns it for later close()."""
    recorder = Recorder(path, handle.event_name, handle.query)
    handle.add_sink(recorder)
    return recorder


def read_header(path: Union[str, os.PathLike]) -> Message:
    with open(path, "r", encoding="utf-8", newline="") as f:
        first = f.readline()
    return _parse_header(first)


def _parse_header(line: str) -> Message:
    if not line.endswith("\n"):
        raise MalformedHeader("missing or incomplete header line")
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedHeader(f"header is not valid JSON: {e.msg}") from e
    if not isinstance(header, dict):
        raise MalformedHeader("header is not an object")
    if header.get("format") != FORMAT_NAME:
        raise MalformedHeader(f"not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise MalformedHeader(f"unsupported version: {header.get('version')!r}")
    for field in ("event", "query"):
        if not isinstance(header.get(field), str):
            raise MalformedHeader(f"header field {field!r} missing or not a string")
    if not isinstance(header.get("created"), (int, float)) or isinstance(
        header.get("created"), bool
    ):
        raise MalformedHeader("header field 'created' missing or not a number")
    return header


def replay(path: Union[str, os.PathLike], speed: Speed = 1.0,
           sleep=time.sleep) -> Iterator[Message]:
    """Yield the file's messages in order with original seq and t.

    speed is a positive rate multiplier, or "max" for no pacing. Pacing
    sleeps each recorded t-delta divided by speed before the next item.
    Iteration stops at the first malformed complete line by raising
    MalformedLine (items before it are still delivered); a trailing
    partial line is ignored.
    """
    if speed == "max":
        rate = None
    elif isinstance(speed, bool) or not isinstance(speed, (int, float)):
        raise ValueError(f"speed must be a positive number or 'max', got {speed!r}")
    elif speed <= 0 or speed != speed:
        raise ValueError(f"speed must be a positive number or 'max', got {speed!r}")
    else:
        rate = float(speed)
    return _replay_lines(os.fspath(path), rate, sleep)


def _replay_lines(path: str, rate: Optional[float], sleep) -> Iterator[Message]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        _parse_header(f.readline())
        prev_t: Optional[float] = None
        line_no = 1
        for line in f:
            line_no += 1
            if not line.endswith("\n"):
                return  # incomplete trailing write; valid prefix ends here
            try:
                msg = wire.decode(line)
            except (wire.MalformedLine, wire.UnknownType) as e:
                raise MalformedLine(line_no, str(e)) from None
            if "kind" not in msg:
                raise MalformedLine(line_no, "not a data message")
            if rate is not None:
                t = msg["t"]
                if prev_t is not None and t > prev_t:
                    sleep((t - prev_t) / rate)
                prev_t = t
            yield msg

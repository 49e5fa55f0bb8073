"""Line-delimited codec for the control and data channels.

Every message is one UTF-8 JSON object per line. Control messages carry a
"type" field; data-channel messages carry a "kind" field instead. Floats are
rendered with Python's shortest round-trip repr; non-finite floats appear as
the reserved strings "NaN", "Inf", "-Inf" inside value positions (the `value`
field and anything nested under it). Those three strings are therefore
reserved tokens of the encoding and always decode back to floats.
"""

from __future__ import annotations

import json
import math
from typing import Any, Dict, Iterable, List, Optional, Union

from .values import Value, ensure_value

PROTO_VERSION = 1

CONTROL_REQUEST_TYPES = (
    "create_stream",
    "close_stream",
    "list_events",
    "list_streams",
    "set_observable",
)
ERROR_CODES = (
    "parse_error",
    "unknown_event",
    "unknown_observable",
    "unknown_stream",
    "readonly",
    "internal",
)
DATA_KINDS = ("item", "error", "closed", "dropped")

# Canonical field order per message type; fields not listed are appended in
# insertion order (ok responses carry an open payload).
_FIELD_ORDER = {
    "hello": ("type", "proto", "data_port"),
    "create_stream": ("type", "event", "query", "stream_id"),
    "close_stream": ("type", "stream_id"),
    "list_events": ("type",),
    "list_streams": ("type",),
    "set_observable": ("type", "name", "value", "at_event"),
    "subscribe": ("type", "streams"),
    "ok": ("type",),
    "error": ("type", "code", "message"),
}
_DATA_FIELD_ORDER = ("stream", "seq", "t", "kind", "value", "count")


class MalformedLine(ValueError):
    """A line that is not a valid message of any type."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(message)
        self.offset = offset


class UnknownType(ValueError):
    """A control message with a "type" this protocol version does not know."""

    def __init__(self, type_name: str):
        super().__init__(f"unknown message type: {type_name!r}")
        self.type = type_name


def encode_value(value: Value) -> Any:
    """Map a value onto JSON-safe data, replacing non-finite floats."""
    if isinstance(value, float):
        if math.isnan(value):
            return "NaN"
        if math.isinf(value):
            return "Inf" if value > 0 else "-Inf"
        return value
    if isinstance(value, list):
        return [encode_value(v) for v in value]
    if isinstance(value, dict):
        return {k: encode_value(v) for k, v in value.items()}
    return value


def decode_value(raw: Any) -> Value:
    """Inverse of encode_value: reserved strings become floats again."""
    if raw == "NaN":
        return math.nan
    if raw == "Inf":
        return math.inf
    if raw == "-Inf":
        return -math.inf
    if isinstance(raw, list):
        return [decode_value(v) for v in raw]
    if isinstance(raw, dict):
        return {k: decode_value(v) for k, v in raw.items()}
    return raw


def _ordered(msg: Dict[str, Any], order: Iterable[str]) -> Dict[str, Any]:
    out = {name: msg[name] for name in order if name in msg}
    for name, v in msg.items():
        if name not in out:
            out[name] = v
    return out


def encode(msg: Dict[str, Any]) -> bytes:
    """Encode one message as a newline-terminated UTF-8 line."""
    if "type" in msg:
        msg_type = msg["type"]
        if msg_type not in _FIELD_ORDER:
            raise UnknownType(str(msg_type))
        out = _ordered(msg, _FIELD_ORDER[msg_type])
    elif "kind" in msg:
        out = _ordered(msg, _DATA_FIELD_ORDER)
    else:
        raise MalformedLine("message has neither 'type' nor 'kind'")
    if "value" in out:
        out = dict(out)
        out["value"] = encode_value(out["value"])
    text = json.dumps(out, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    return text.encode("utf-8") + b"\n"


def _require(obj: Dict[str, Any], field: str, types: Union[type, tuple]) -> Any:
    if field not in obj:
        raise MalformedLine(f"missing field {field!r}")
    v = obj[field]
    allowed = types if isinstance(types, tuple) else (types,)
    if isinstance(v, bool) and bool not in allowed:
        raise MalformedLine(f"field {field!r} has wrong type")
    if not isinstance(v, types):
        raise MalformedLine(f"field {field!r} has wrong type")
    return v


def _decode_control(obj: Dict[str, Any]) -> Dict[str, Any]:
    msg_type = obj["type"]
    if not isinstance(msg_type, str):
        raise MalformedLine("'type' must be a string")
    if msg_type not in _FIELD_ORDER:
        raise UnknownType(msg_type)

    out: Dict[str, Any] = {"type": msg_type}
    if msg_type == "hello":
        out["proto"] = _require(obj, "proto", int)
        if "data_port" in obj:
            out["data_port"] = _require(obj, "data_port", int)
    elif msg_type == "create_stream":
        out["event"] = _require(obj, "event", str)
        out["query"] = _require(obj, "query", str)
        if "stream_id" in obj:
            out["stream_id"] = _require(obj, "stream_id", str)
    elif msg_type == "close_stream":
        out["stream_id"] = _require(obj, "stream_id", str)
    elif msg_type == "set_observable":
        out["name"] = _require(obj, "name", str)
        if "value" not in obj:
            raise MalformedLine("missing field 'value'")
        out["value"] = decode_value(obj["value"])
        if "at_event" in obj:
            out["at_event"] = _require(obj, "at_event", str)
    elif msg_type == "subscribe":
        streams = _require(obj, "streams", (str, list))
        if isinstance(streams, str):
            if streams != "*":
                raise MalformedLine("'streams' must be a list of ids or \"*\"")
        elif not all(isinstance(s, str) for s in streams):
            raise MalformedLine("'streams' entries must be strings")
        out["streams"] = streams
    elif msg_type == "error":
        out["code"] = _require(obj, "code", str)
        out["message"] = _require(obj, "message", str)
    elif msg_type == "ok":
        # Open payload: responses attach whatever fields the request implies.
        for k, v in obj.items():
            if k != "type":
                out[k] = v
    # list_events / list_streams carry no fields.
    return out


def _decode_data(obj: Dict[str, Any]) -> Dict[str, Any]:
    kind = obj["kind"]
    if kind not in DATA_KINDS:
        raise MalformedLine(f"unknown data kind: {kind!r}")
    out: Dict[str, Any] = {}
    if "stream" in obj:
        out["stream"] = _require(obj, "stream", str)
    seq = _require(obj, "seq", int)
    if seq < 0:
        raise MalformedLine("'seq' must be non-negative")
    out["seq"] = seq
    t = _require(obj, "t", (int, float))
    out["t"] = float(t)
    out["kind"] = kind
    if "value" in obj:
        out["value"] = decode_value(obj["value"])
    if kind == "dropped":
        out["count"] = _require(obj, "count", int)
    return out


def decode(line: Union[bytes, str]) -> Dict[str, Any]:
    """Decode one line into a message dict.

    Unknown top-level fields are dropped; an unknown "type" raises
    UnknownType; anything else unusable raises MalformedLine with the
    character offset where parsing failed.
    """
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedLine("invalid UTF-8", offset=e.start) from e
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedLine(f"bad JSON: {e.msg}", offset=e.pos) from e
    if not isinstance(obj, dict):
        raise MalformedLine("line is not an object")
    if "type" in obj:
        return _decode_control(obj)
    if "kind" in obj:
        return _decode_data(obj)
    raise MalformedLine("message has neither 'type' nor 'kind'")


def hello(data_port: Optional[int] = None) -> Dict[str, Any]:
    msg: Dict[str, Any] = {"type": "hello", "proto": PROTO_VERSION}
    if data_port is not None:
        msg["data_port"] = data_port
    return msg


def subscribe(streams: Union[str, List[str]]) -> Dict[str, Any]:
    return {"type": "subscribe", "streams": streams}


def ok(**fields: Any) -> Dict[str, Any]:
    return {"type": "ok", **fields}


def error(code: str, message: str = "") -> Dict[str, Any]:
    if code not in ERROR_CODES:
        raise ValueError(f"not a protocol error code: {code!r}")
    return {"type": "error", "code": code, "message": message}


def data_message(
    kind: str,
    seq: int,
    t: float,
    stream: Optional[str] = None,
    value: Value = None,
    has_value: bool = False,
    count: Optional[int] = None,
) -> Dict[str, Any]:
    """Build a data message; pass has_value=True to include a null value."""
    msg: Dict[str, Any] = {}
    if stream is not None:
        msg["stream"] = stream
    msg["seq"] = seq
    msg["t"] = t
    msg["kind"] = kind
    if has_value or value is not None:
        msg["value"] = ensure_value(value)
    if count is not None:
        msg["count"] = count
    return msg

"""Client library: sessions, stream handles, and sinks.

A Session owns one control connection (request/response, serialized by a
lock) and one background receive thread multiplexing every handle's data
connection through a selector. Each stream handle gets its own data
connection whose subscription is sent before the create_stream request, so
no item can fall between creation and subscription.
"""

from __future__ import annotations

import itertools
import json
import secrets
import selectors
import socket
import sys
import threading
import time
from collections import deque
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple, Union

from . import wire
from .values import Value

DEFAULT_TIMEOUT = 30.0
HANDLE_QUEUE_LIMIT = 10_000

Message = Dict[str, Any]
Sink = Callable[[Message], None]


class ClientError(Exception):
    pass


class ConnectRefused(ClientError):
    pass


class ProtocolMismatch(ClientError):
    def __init__(self, proto):
        super().__init__(f"peer speaks protocol {proto!r}, need {wire.PROTO_VERSION}")
        self.proto = proto


class Disconnected(ClientError):
    pass


class AgentError(ClientError):
    """An error response from the agent, carrying the protocol error code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


def _read_line(sock: socket.socket, limit: int = 1 << 16) -> bytes:
    """Byte-wise readline for handshake lines; avoids buffered readers so the
    socket can be handed to the selector with no bytes in limbo."""
    buf = bytearray()
    while len(buf) < limit:
        b = sock.recv(1)
        if not b:
            raise Disconnected("connection closed during handshake")
        if b == b"\n":
            return bytes(buf) + b"\n"
        buf += b
    raise Disconnected("handshake line too long")


def _expect_hello(sock: socket.socket) -> Message:
    try:
        msg = wire.decode(_read_line(sock))
    except (wire.MalformedLine, wire.UnknownType) as e:
        raise ProtocolMismatch(str(e)) from e
    if msg.get("type") != "hello":
        raise ProtocolMismatch(msg.get("type"))
    if msg.get("proto") != wire.PROTO_VERSION:
        raise ProtocolMismatch(msg.get("proto"))
    return msg


class StreamHandle:
    """One live stream. Queue mode: iterate or get(); callback mode: the
    callback runs on the session's receive thread and must not block."""

    def __init__(self, session: "Session", stream_id: str, event: str, query: str,
                 callback: Optional[Sink], conn: socket.socket):
        self.session = session
        self.stream_id = stream_id
        self.event_name = event
        self.query = query
        self.last_seen_seq = -1
        self.sink_errors: List[str] = []
        self._callback = callback
        self._conn = conn
        self._sinks: List[Sink] = []
        self._cond = threading.Condition()
        self._queue: deque = deque()
        self._owed_drops = 0
        self._owed_last_seq = 0
        self._closed = False

    # --- consumption ---------------------------------------------------------

    def get(self, timeout: Optional[float] = None) -> Optional[Message]:
        """Next message in queue mode; None on timeout or after close."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                if self._owed_drops and not self._queue:
                    return self._pop_notice()
                if self._queue:
                    msg = self._queue.popleft()
                    if self._owed_drops and msg["kind"] != "dropped":
                        self._queue.appendleft(msg)
                        return self._pop_notice()
                    return msg
                if self._closed:
                    return None
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(timeout=remaining)

    def __iter__(self) -> Iterator[Message]:
        while True:
            msg = self.get()
            if msg is None:
                return
            yield msg
            if msg["kind"] == "closed":
                return

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        """Ask the agent to close the stream; the closed marker arrives as a
        normal delivery."""
        if not self._closed:
            self.session._request({"type": "close_stream", "stream_id": self.stream_id})

    def add_sink(self, sink: Sink) -> None:
        with self._cond:
            self._sinks.append(sink)

    # --- delivery (receive thread) --------------------------------------------

    def _deliver(self, msg: Message) -> None:
        seq = msg.get("seq", 0)
        if seq > self.last_seen_seq:
            self.last_seen_seq = seq
        with self._cond:
            sinks = list(self._sinks)
        for sink in sinks:
            try:
                sink(msg)
            except Exception as e:  # a failing sink must not stop the others
                self.sink_errors.append(f"{type(e).__name__}: {e}")
                with self._cond:
                    if sink in self._sinks:
                        self._sinks.remove(sink)
        if self._callback is not None:
            try:
                self._callback(msg)
            except Exception as e:
                self.sink_errors.append(f"{type(e).__name__}: {e}")
        else:
            with self._cond:
                if len(self._queue) >= HANDLE_QUEUE_LIMIT:
                    victim = self._queue.popleft()
                    self._owed_drops += 1
                    self._owed_last_seq = victim["seq"]
                self._queue.append(msg)
                self._cond.notify()
        if msg["kind"] == "closed":
            with self._cond:
                self._closed = True
                self._cond.notify()

    def _pop_notice(self) -> Message:
        notice = {
            "stream": self.stream_id,
            "seq": self._owed_last_seq,
            "t": time.time(),
            "kind": "dropped",
            "count": self._owed_drops,
        }
        self._owed_drops = 0
        return notice

    def _connection_lost(self) -> None:
        if self._closed:
            return
        base = self.last_seen_seq + 1
        now = time.time()
        self._deliver(
            {"stream": self.stream_id, "seq": base, "t": now, "kind": "error",
             "value": "connection lost"}
        )
        self._deliver(
            {"stream": self.stream_id, "seq": base + 1, "t": now, "kind": "closed"}
        )


class Session:
    def __init__(self, host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
        self._host = host
        self._timeout = timeout
        try:
            self._ctl = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise ConnectRefused(f"{host}:{port}: {e}") from e
        hello = _expect_hello(self._ctl)
        self._data_port = hello.get("data_port")
        self._ctl_lock = threading.Lock()
        self._handles: Dict[str, StreamHandle] = {}
        self._handles_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._closed = False
        self._sel = selectors.DefaultSelector()
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._actions: deque = deque()
        self._sel.register(self._wake_r, selectors.EVENT_READ, None)
        self._rx = threading.Thread(target=self._receive_loop, daemon=True)
        self._rx.start()

    # --- public operations -----------------------------------------------------

    def create_stream(
        self,
        event_name: str,
        query_text: str,
        window: Optional[str] = None,
        callback: Optional[Sink] = None,
    ) -> StreamHandle:
        if self._data_port is None:
            raise ProtocolMismatch("peer advertised no data port")
        query = query_text if window is None else f"{query_text} | window({window})"
        stream_id = f"c{next(self._ids)}-{secrets.token_hex(3)}"
        try:
            conn = socket.create_connection((self._host, self._data_port),
                                            timeout=self._timeout)
        except OSError as e:
            raise ConnectRefused(f"data port: {e}") from e
        try:
            _expect_hello(conn)
            conn.sendall(wire.encode(wire.subscribe([stream_id])))
        except OSError as e:
            conn.close()
            raise Disconnected(str(e)) from e
        handle = StreamHandle(self, stream_id, event_name, query, callback, conn)
        with self._handles_lock:
            self._handles[stream_id] = handle
        self._post_action(("add", conn, handle))
        try:
            self._request(
                {"type": "create_stream", "event": event_name, "query": query,
                 "stream_id": stream_id}
            )
        except Exception:
            with self._handles_lock:
                self._handles.pop(stream_id, None)
            self._post_action(("drop", conn, handle))
            raise
        return handle

    def set_observable(self, name: str, value: Value,
                       at_event: Optional[str] = None) -> None:
        msg: Message = {"type": "set_observable", "name": name, "value": value}
        if at_event is not None:
            msg["at_event"] = at_event
        self._request(msg)

    def list_events(self) -> Tuple[List[str], List[str]]:
        r = self._request({"type": "list_events"})
        return r.get("events", []), r.get("observables", [])

    def list_streams(self) -> List[Message]:
        return self._request({"type": "list_streams"}).get("streams", [])

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._post_action(("stop", None, None))
        self._rx.join(timeout=2)
        try:
            self._ctl.close()
        except OSError:
            pass

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # --- control channel ---------------------------------------------------------

    def _request(self, msg: Message) -> Message:
        with self._ctl_lock:
            if self._closed:
                raise Disconnected("session closed")
            try:
                self._ctl.sendall(wire.encode(msg))
                line = _read_line(self._ctl)
            except (OSError, Disconnected) as e:
                raise Disconnected(str(e)) from e
            try:
                resp = wire.decode(line)
            except (wire.MalformedLine, wire.UnknownType) as e:
                raise Disconnected(f"unreadable response: {e}") from e
        if resp.get("type") == "error":
            raise AgentError(resp.get("code", "internal"), resp.get("message", ""))
        return resp

    # --- receive thread ------------------------------------------------------------

    def _post_action(self, action) -> None:
        self._actions.append(action)
        try:
            self._wake_w.sendall(b"x")
        except OSError:
            pass

    def _receive_loop(self) -> None:
        buffers: Dict[socket.socket, bytearray] = {}
        running = True
        while running:
            for key, _ in self._sel.select():
                sock = key.fileobj
                if sock is self._wake_r:
                    try:
                        sock.recv(4096)
                    except OSError:
                        pass
                    while self._actions:
                        kind, conn, handle = self._actions.popleft()
                        if kind == "add":
                            conn.setblocking(False)
                            buffers[conn] = bytearray()
                            self._sel.register(conn, selectors.EVENT_READ, handle)
                        elif kind == "drop":
                            self._forget(conn, buffers)
                        else:
                            running = False
                    continue
                handle = key.data
                try:
                    chunk = sock.recv(65536)
                except (BlockingIOError, InterruptedError):
                    continue
                except OSError:
                    chunk = b""
                if not chunk:
                    self._forget(sock, buffers)
                    handle._connection_lost()
                    continue
                buf = buffers[sock]
                buf += chunk
                while True:
                    nl = buf.find(b"\n")
                    if nl < 0:
                        break
                    line = bytes(buf[: nl + 1])
                    del buf[: nl + 1]
                    self._dispatch(handle, line)
                if handle.closed:
                    self._forget(sock, buffers)
        for sock in list(buffers):
            self._forget(sock, buffers)
        try:
            self._wake_r.close()
            self._wake_w.close()
        except OSError:
            pass

    def _dispatch(self, handle: StreamHandle, line: bytes) -> None:
        try:
            msg = wire.decode(line)
        except (wire.MalformedLine, wire.UnknownType) as e:
            msg = {"stream": handle.stream_id, "seq": handle.last_seen_seq + 1,
                   "t": time.time(), "kind": "error", "value": f"unreadable line: {e}"}
        if "type" in msg:
            return  # stray control message on the data channel; ignore
        handle._deliver(msg)

    def _forget(self, conn: socket.socket, buffers: Dict) -> None:
        try:
            self._sel.unregister(conn)
        except (KeyError, ValueError):
            pass
        buffers.pop(conn, None)
        try:
            conn.close()
        except OSError:
            pass


def open_session(address: Union[str, Tuple[str, int]],
                 timeout: float = DEFAULT_TIMEOUT) -> Session:
    """Connect to an agent. address is "host:port" or a (host, port) pair."""
    if isinstance(address, str):
        host, _, port_text = address.rpartition(":")
        if not host or not port_text.isdigit():
            raise ConnectRefused(f"bad address: {address!r}")
        return Session(host, int(port_text), timeout)
    return Session(address[0], address[1], timeout)


def route_to_sink(handle: StreamHandle, sink: Sink) -> None:
    """Attach a sink; it sees every delivery from now on, in attachment order."""
    handle.add_sink(sink)


def console_sink(out=None) -> Sink:
    """Print one canonical-encoded line per message value."""

    def sink(msg: Message) -> None:
        stream = out or sys.stdout
        kind = msg["kind"]
        if kind == "item":
            stream.write(format_value(msg.get("value")) + "\n")
        elif kind == "error":
            stream.write(f"# error: {msg.get('value')}\n")
        elif kind == "dropped":
            stream.write(f"# dropped {msg.get('count')} items\n")
        else:
            stream.write("# closed\n")
        stream.flush()

    return sink


def format_value(value: Value) -> str:
    """Canonical single-line text for one value (same encoding as the wire)."""
    return json.dumps(wire.encode_value(value), separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)

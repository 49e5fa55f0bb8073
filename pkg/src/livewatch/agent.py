"""In-process telemetry agent.

The host registers observables (lazy getters, optional setters), declares or
implicitly creates event names, and calls notify() at each event. Clients talk
to the agent over two TCP endpoints: a request/response control channel and a
publish-only data channel. All control requests are queued by the network
threads and drained at notify boundaries, so the host thread is the only
thread that ever touches observables and the stream table; with no active
streams and no queued requests, notify costs a few constant-time checks and
pulls nothing.
"""

from __future__ import annotations

import os
import select
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Set, Tuple

from . import dsl, wire
from .dsl_eval import EvalError
from .engine import Emit, Error, StreamItem, StreamProcessor, create_stream_processor
from .values import InvalidValue, Value, ensure_value

DEFAULT_QUEUE_LIMIT = 10_000

CONTROL_PORT_ENV = "LIVEWATCH_CONTROL_PORT"
DATA_PORT_ENV = "LIVEWATCH_DATA_PORT"


class DuplicateName(ValueError):
    """An observable name registered twice on one agent."""


@dataclass
class PendingCommand:
    name: str
    value: Value
    at_event: Optional[str] = None  # None: apply at the next event of any name


class _Observable:
    __slots__ = ("name", "getter", "setter", "pull_count")

    def __init__(self, name, getter, setter):
        self.name = name
        self.getter = getter
        self.setter = setter
        self.pull_count = 0

    def pull(self) -> Value:
        self.pull_count += 1
        return ensure_value(self.getter())


class _StreamReg:
    __slots__ = ("stream_id", "event", "pipeline", "processor", "needed", "posted", "out_seq")

    def __init__(self, stream_id: str, event: str, pipeline: dsl.Pipeline,
                 processor: StreamProcessor, needed: Set[str]):
        self.stream_id = stream_id
        self.event = event
        self.pipeline = pipeline
        self.processor = processor
        self.needed = needed
        self.posted = 0  # items posted into the processor
        self.out_seq = 0  # per-stream message counter, assigned at emission


class _Subscriber:
    """Bounded per-connection queue; overflow drops oldest and owes a notice."""

    def __init__(self, conn, streams, limit: int):
        self.conn = conn
        self.filter = None if streams == "*" else set(streams)
        self.limit = limit
        self.cond = threading.Condition()
        self.queue: deque = deque()
        self.drops: Dict[str, List[int]] = {}  # stream -> [count, last dropped seq]
        self.closing = False  # flush queue, then stop
        self.dead = False

    def wants(self, stream_id: str) -> bool:
        return self.filter is None or stream_id in self.filter

    def offer(self, stream_id: str, seq: int, kind: str, line: bytes) -> None:
        with self.cond:
            if self.dead:
                return
            if len(self.queue) >= self.limit:
                victim = None
                for i, entry in enumerate(self.queue):
                    if entry[2] != "closed":  # never drop a close marker
                        victim = entry
                        del self.queue[i]
                        break
                if victim is None:
                    victim = self.queue.popleft()
                d = self.drops.setdefault(victim[0], [0, 0])
                d[0] += 1
                d[1] = victim[1]
            self.queue.append((stream_id, seq, kind, line))
            self.cond.notify()

    def close(self) -> None:
        with self.cond:
            self.closing = True
            self.cond.notify()

    def backlog(self) -> int:
        with self.cond:
            return len(self.queue)


class _AgentTCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, handler, agent: "Agent"):
        self.agent = agent
        super().__init__(addr, handler)


class _ControlHandler(socketserver.StreamRequestHandler):
    def handle(self):
        agent = self.server.agent
        write_lock = threading.Lock()

        def reply(line: bytes) -> None:
            # ValueError: socketserver closes wfile when this connection's
            # thread exits, but queued requests may be answered later.
            with write_lock:
                try:
                    self.wfile.write(line)
                    self.wfile.flush()
                except (OSError, ValueError):
                    pass

        reply(wire.encode(wire.hello(data_port=agent.data_port)))
        while True:
            try:
                raw = self.rfile.readline()
            except OSError:
                return
            if not raw:
                return
            if raw.strip() == b"":
                continue
            prebuilt = None
            msg = None
            try:
                msg = wire.decode(raw)
                if msg.get("type") not in wire.CONTROL_REQUEST_TYPES:
                    prebuilt = wire.error(
                        "parse_error", f"not a control request: {msg.get('type')}"
                    )
            except (wire.MalformedLine, wire.UnknownType) as e:
                prebuilt = wire.error("parse_error", str(e))
            # Queued even when malformed so responses keep request order;
            # everything is answered at the next notify boundary.
            agent._enqueue_control(msg, prebuilt, reply)


class _DataHandler(socketserver.StreamRequestHandler):
    def handle(self):
        agent = self.server.agent
        try:
            self.wfile.write(wire.encode(wire.hello()))
            self.wfile.flush()
            raw = self.rfile.readline()
            if not raw:
                return
            msg = wire.decode(raw)
            if msg.get("type") != "subscribe":
                self.wfile.write(wire.encode(wire.error("parse_error", "expected subscribe")))
                return
        except (OSError, wire.MalformedLine, wire.UnknownType):
            return
        sub = _Subscriber(self.connection, msg["streams"], agent.queue_limit)
        agent._add_subscriber(sub)
        try:
            self._pump(sub, agent)
        finally:
            agent._remove_subscriber(sub)

    def _pump(self, sub: _Subscriber, agent: "Agent") -> None:
        conn = self.connection
        while True:
            notices: List[Tuple[str, List[int]]] = []
            entry = None
            with sub.cond:
                while not sub.queue and not sub.closing:
                    sub.cond.wait(timeout=0.5)
                    if not sub.queue and self._peer_gone(conn):
                        sub.dead = True
                        return
                    if not sub.queue and sub.drops:
                        break  # flush owed notices while idle
                if sub.queue:
                    entry = sub.queue.popleft()
                    owed = sub.drops.pop(entry[0], None)
                    if owed:
                        notices.append((entry[0], owed))
                elif sub.drops:
                    notices = list(sub.drops.items())
                    sub.drops.clear()
                elif sub.closing:
                    sub.dead = True
                    return
            try:
                for stream_id, (count, last_seq) in notices:
                    line = wire.encode(
                        wire.data_message(
                            kind="dropped",
                            seq=last_seq,
                            t=agent._clock(),
                            stream=stream_id,
                            count=count,
                        )
                    )
                    conn.sendall(line)
                if entry is not None:
                    conn.sendall(entry[3])
            except OSError:
                with sub.cond:
                    sub.dead = True
                return

    @staticmethod
    def _peer_gone(conn) -> bool:
        # Subscribers send nothing after the header; readable means EOF.
        try:
            readable, _, _ = select.select([conn], [], [], 0)
            if readable:
                return conn.recv(4096) == b""
        except OSError:
            return True
        return False


class Agent:
    """One per host process. notify() must be externally serialized."""

    def __init__(
        self,
        control_port: Optional[int] = None,
        data_port: Optional[int] = None,
        host: str = "127.0.0.1",
        events: Tuple[str, ...] = (),
        queue_limit: int = DEFAULT_QUEUE_LIMIT,
        clock: Callable[[], float] = time.time,
    ):
        self._cfg_control_port = _resolve_port(control_port, CONTROL_PORT_ENV)
        self._cfg_data_port = _resolve_port(data_port, DATA_PORT_ENV)
        self._host = host
        self.queue_limit = queue_limit
        self._clock = clock
        self._observables: Dict[str, _Observable] = {}
        self._streams: Dict[str, _StreamReg] = {}
        self._by_event: Dict[str, Dict[str, _StreamReg]] = {}
        self._needed_by_event: Dict[str, Set[str]] = {}
        self._events_declared: Set[str] = set(events)
        self._events_seen: Set[str] = set()
        self._pending: List[PendingCommand] = []
        self._control_in: deque = deque()
        self._subscribers: List[_Subscriber] = []
        self._subs_lock = threading.Lock()
        self._control_server: Optional[_AgentTCPServer] = None
        self._data_server: Optional[_AgentTCPServer] = None
        self._next_stream_no = 1
        self._stopped = False

    # --- host-facing API ---------------------------------------------------

    def register_observable(
        self,
        name: str,
        getter: Callable[[], Value],
        setter: Optional[Callable[[Value], None]] = None,
    ) -> None:
        if name in self._observables:
            raise DuplicateName(name)
        self._observables[name] = _Observable(name, getter, setter)

    def declare_event(self, name: str) -> None:
        self._events_declared.add(name)

    def notify(self, event_name: str, group_end: bool = False) -> None:
        if self._control_in:
            self._drain_control()
        if self._pending:
            self._apply_pending(event_name)
        self._events_seen.add(event_name)
        regs = self._by_event.get(event_name)
        if not regs:
            return
        t = self._clock()
        pulled: Dict[str, Value] = {}
        failed: Dict[str, str] = {}
        for name in self._needed_by_event[event_name]:
            try:
                pulled[name] = self._observables[name].pull()
            except Exception as e:  # host getters may fail; never propagate
                failed[name] = str(e)
        for reg in list(regs.values()):
            bad = [n for n in reg.needed if n in failed]
            if bad:
                self._publish_error(
                    reg, t, f"observable {bad[0]!r} unavailable: {failed[bad[0]]}"
                )
                continue
            record = {n: pulled[n] for n in reg.needed}
            item = StreamItem(value=record, group_end=group_end, seq=reg.posted, t_wall=t)
            reg.posted += 1
            out = reg.processor.post(item)
            if isinstance(out, Emit):
                self._publish_item(reg, t, out.value)
            elif isinstance(out, Error):
                self._publish_error(reg, t, out.error.message)

    def handle_control(self, request: Dict[str, Any]) -> Dict[str, Any]:
        """Apply one control request. Only call at safe points: the network
        path funnels requests here via the notify-boundary drain."""
        rtype = request.get("type")
        if rtype == "create_stream":
            return self._ctl_create(request)
        if rtype == "close_stream":
            return self._ctl_close(request)
        if rtype == "list_events":
            return wire.ok(
                events=sorted(self._events_declared | self._events_seen),
                observables=sorted(self._observables),
            )
        if rtype == "list_streams":
            return wire.ok(
                streams=[
                    {
                        "stream_id": reg.stream_id,
                        "event": reg.event,
                        "query": dsl.format_pipeline(reg.pipeline),
                    }
                    for reg in self._streams.values()
                ]
            )
        if rtype == "set_observable":
            return self._ctl_set(request)
        return wire.error("parse_error", f"not a control request: {rtype}")

    def stop(self) -> None:
        """Final drain, flush partial windows, publish close markers, shut
        down the network endpoints after subscriber queues empty."""
        if self._stopped:
            return
        self._stopped = True
        self._drain_control()
        for reg in list(self._streams.values()):
            self._close_stream_reg(reg)
        self._streams.clear()
        self._by_event.clear()
        self._needed_by_event.clear()
        with self._subs_lock:
            subs = list(self._subscribers)
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            if all(s.backlog() == 0 or s.dead for s in subs):
                break
            time.sleep(0.01)
        for sub in subs:
            sub.close()
        for server in (self._control_server, self._data_server):
            if server is not None:
                server.shutdown()
                server.server_close()
        self._control_server = None
        self._data_server = None

    # --- test hooks ----------------------------------------------------------

    def pull_count(self, name: str) -> int:
        return self._observables[name].pull_count

    def total_pull_count(self) -> int:
        return sum(o.pull_count for o in self._observables.values())

    @property
    def observable_names(self) -> Set[str]:
        return set(self._observables)

    @property
    def stream_count(self) -> int:
        return len(self._streams)

    # --- network lifecycle ---------------------------------------------------

    def start(self) -> None:
        if self._data_server is not None:
            return
        self._data_server = _AgentTCPServer(
            (self._host, self._cfg_data_port), _DataHandler, self
        )
        self._control_server = _AgentTCPServer(
            (self._host, self._cfg_control_port), _ControlHandler, self
        )
        for server in (self._data_server, self._control_server):
            thread = threading.Thread(target=server.serve_forever, daemon=True)
            thread.start()

    @property
    def control_port(self) -> Optional[int]:
        if self._control_server is None:
            return None
        return self._control_server.server_address[1]

    @property
    def data_port(self) -> Optional[int]:
        if self._data_server is None:
            return None
        return self._data_server.server_address[1]

    # --- control-request handling ---------------------------------------------

    def _ctl_create(self, request: Dict[str, Any]) -> Dict[str, Any]:
        event = request.get("event")
        query = request.get("query")
        if not isinstance(event, str) or not isinstance(query, str):
            return wire.error("parse_error", "create_stream needs event and query")
        try:
            pipeline = dsl.parse(query)
        except (dsl.ParseError, dsl.ValidationError) as e:
            return wire.error("parse_error", str(e))
        if event not in self._events_declared and event not in self._events_seen:
            return wire.error("unknown_event", event)
        names, needs_all = dsl.observable_reads(pipeline)
        unknown = sorted(set(names) - set(self._observables))
        if unknown:
            return wire.error("unknown_observable", unknown[0])
        needed = set(self._observables) if needs_all else set(names)
        stream_id = request.get("stream_id")
        if stream_id is None:
            while f"s{self._next_stream_no}" in self._streams:
                self._next_stream_no += 1
            stream_id = f"s{self._next_stream_no}"
            self._next_stream_no += 1
        elif stream_id in self._streams:
            return wire.error("internal", f"stream_id already in use: {stream_id}")
        reg = _StreamReg(stream_id, event, pipeline, create_stream_processor(pipeline), needed)
        self._streams[stream_id] = reg
        self._by_event.setdefault(event, {})[stream_id] = reg
        self._recompute_needed(event)
        return wire.ok(stream_id=stream_id, event=event, query=dsl.format_pipeline(pipeline))

    def _ctl_close(self, request: Dict[str, Any]) -> Dict[str, Any]:
        stream_id = request.get("stream_id")
        reg = self._streams.pop(stream_id, None)
        if reg is None:
            return wire.error("unknown_stream", str(stream_id))
        self._by_event[reg.event].pop(stream_id, None)
        if not self._by_event[reg.event]:
            del self._by_event[reg.event]
            self._needed_by_event.pop(reg.event, None)
        else:
            self._recompute_needed(reg.event)
        self._close_stream_reg(reg)
        return wire.ok(stream_id=stream_id)

    def _ctl_set(self, request: Dict[str, Any]) -> Dict[str, Any]:
        name = request.get("name")
        obs = self._observables.get(name)
        if obs is None:
            return wire.error("unknown_observable", str(name))
        if obs.setter is None:
            return wire.error("readonly", name)
        at_event = request.get("at_event")
        if at_event is not None and (
            at_event not in self._events_declared and at_event not in self._events_seen
        ):
            return wire.error("unknown_event", at_event)
        try:
            value = ensure_value(request.get("value"))
        except InvalidValue as e:
            return wire.error("internal", str(e))
        self._pending.append(PendingCommand(name, value, at_event))
        return wire.ok(name=name)

    # --- internals -------------------------------------------------------------

    def _recompute_needed(self, event: str) -> None:
        union: Set[str] = set()
        for reg in self._by_event.get(event, {}).values():
            union |= reg.needed
        self._needed_by_event[event] = union

    def _apply_pending(self, event_name: str) -> None:
        remaining = []
        for cmd in self._pending:
            if cmd.at_event is None or cmd.at_event == event_name:
                obs = self._observables.get(cmd.name)
                if obs is not None and obs.setter is not None:
                    try:
                        obs.setter(cmd.value)
                    except Exception:
                        pass  # host isolation: setter failures never propagate
            else:
                remaining.append(cmd)
        self._pending = remaining

    def _close_stream_reg(self, reg: _StreamReg) -> None:
        t = self._clock()
        out = reg.processor.flush()
        if isinstance(out, Emit):
            self._publish_item(reg, t, out.value)
        seq = reg.out_seq
        reg.out_seq += 1
        self._broadcast(reg.stream_id, seq, "closed",
                        wire.data_message(kind="closed", seq=seq, t=t, stream=reg.stream_id))

    def _publish_item(self, reg: _StreamReg, t: float, value: Value) -> None:
        seq = reg.out_seq
        try:
            msg = wire.data_message(
                kind="item", seq=seq, t=t, stream=reg.stream_id, value=value, has_value=True
            )
        except InvalidValue as e:
            self._publish_error(reg, t, str(e))
            return
        reg.out_seq += 1
        self._broadcast(reg.stream_id, seq, "item", msg)

    def _publish_error(self, reg: _StreamReg, t: float, message: str) -> None:
        seq = reg.out_seq
        reg.out_seq += 1
        msg = wire.data_message(
            kind="error", seq=seq, t=t, stream=reg.stream_id, value=message, has_value=True
        )
        self._broadcast(reg.stream_id, seq, "error", msg)

    def _broadcast(self, stream_id: str, seq: int, kind: str, msg: Dict[str, Any]) -> None:
        line = wire.encode(msg)
        with self._subs_lock:
            subs = list(self._subscribers)
        for sub in subs:
            if sub.wants(stream_id):
                sub.offer(stream_id, seq, kind, line)

    def _enqueue_control(self, msg, prebuilt, reply) -> None:
        self._control_in.append((msg, prebuilt, reply))

    def _drain_control(self) -> None:
        while True:
            try:
                msg, prebuilt, reply = self._control_in.popleft()
            except IndexError:
                return
            response = prebuilt if prebuilt is not None else self.handle_control(msg)
            reply(wire.encode(response))

    def _add_subscriber(self, sub: _Subscriber) -> None:
        with self._subs_lock:
            self._subscribers.append(sub)

    def _remove_subscriber(self, sub: _Subscriber) -> None:
        with self._subs_lock:
            if sub in self._subscribers:
                self._subscribers.remove(sub)


def _resolve_port(arg: Optional[int], env_name: str) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(env_name)
    if env:
        return int(env)
    return 0

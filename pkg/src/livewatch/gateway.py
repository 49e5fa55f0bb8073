"""Browser-facing bridge: exposes any number of agents over HTTP plus a
WebSocket fan-out, and serves recorded stream files as replay pseudo-agents.

Blocking agent traffic runs on worker threads (every HTTP handler here is
sync, so the framework pools it); stream items cross into the event loop
via call_soon_threadsafe and fan out to per-socket bounded queues with the
same drop-oldest + dropped-notice policy the agent applies to its
subscribers. A monitor thread probes each agent link every retry interval
and reconnects lost ones.
"""

from __future__ import annotations

import asyncio
import itertools
import threading
import time
from collections import deque
from contextlib import asynccontextmanager, suppress
from typing import Any, Dict, List, Optional, Set

from fastapi import Body, FastAPI, WebSocket, WebSocketDisconnect
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import client as lw
from . import persistence as ps
from . import wire

DEFAULT_RETRY_INTERVAL = 5.0
DEFAULT_SESSION_TIMEOUT = 10.0
WS_QUEUE_LIMIT = 10_000


class AgentLink:
    def __init__(self, agent_id: str, address: str, replay: bool = False):
        self.agent_id = agent_id
        self.address = address
        self.replay = replay
        self.state = "lost" if not replay else "connected"
        self.session: Optional[lw.Session] = None
        self.events: List[str] = []
        self.observables: List[str] = []

    def snapshot(self) -> Dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "address": self.address,
            "state": self.state,
            "events": list(self.events),
            "observables": list(self.observables),
        }


class GatewayStream:
    def __init__(self, gstream_id: str, agent_id: str, event: str, query: str):
        self.gstream_id = gstream_id
        self.agent_id = agent_id
        self.event = event
        self.query = query
        self.handle = None                  # set for live agent streams
        self.stop = threading.Event()       # set to halt a replay pump


class WsClient:
    """One websocket subscriber; touched only from the event loop."""

    def __init__(self, wanted: Optional[Set[str]], limit: int):
        self.wanted = wanted  # None means all streams
        self.limit = limit
        self.queue: deque = deque()
        self.owed: Dict[str, List] = {}  # gid -> [count, last_seq, agent_id]
        self.wake = asyncio.Event()

    def wants(self, gid: str) -> bool:
        return self.wanted is None or gid in self.wanted

    def offer(self, gid: str, msg: Dict[str, Any]) -> None:
        if len(self.queue) >= self.limit:
            for i, (egid, evicted) in enumerate(self.queue):
                if evicted.get("kind") != "closed":
                    del self.queue[i]
                    owed = self.owed.setdefault(egid, [0, -1, evicted.get("agent_id")])
                    owed[0] += 1
                    owed[1] = evicted.get("seq", owed[1])
                    break
        self.queue.append((gid, msg))
        self.wake.set()

    def take_owed(self, gid: str) -> Optional[Dict[str, Any]]:
        owed = self.owed.pop(gid, None)
        if owed is None:
            return None
        return {
            "seq": owed[1],
            "t": time.time(),
            "kind": "dropped",
            "count": owed[0],
            "agent_id": owed[2],
            "gstream_id": gid,
        }


class Hub:
    def __init__(self, retry_interval: float, session_timeout: float,
                 ws_queue_limit: int):
        self.retry_interval = retry_interval
        self.session_timeout = session_timeout
        self.ws_queue_limit = ws_queue_limit
        self.lock = threading.RLock()
        self.links: Dict[str, AgentLink] = {}
        self.streams: Dict[str, GatewayStream] = {}
        self.clients: Set[WsClient] = set()  # event-loop only
        self.loop: Optional[asyncio.AbstractEventLoop] = None
        self._agent_ids = itertools.count(1)
        self._gids = itertools.count(1)
        self._replay_ids = itertools.count(1)
        self._shutdown = threading.Event()
        self._monitor: Optional[threading.Thread] = None

    # --- agent links ---------------------------------------------------------

    def add_link(self, address: str, agent_id: Optional[str] = None) -> AgentLink:
        with self.lock:
            if agent_id is None:
                agent_id = f"a{next(self._agent_ids)}"
            if agent_id in self.links:
                raise ValueError(f"agent_id already registered: {agent_id}")
            link = AgentLink(agent_id, address)
            self.links[agent_id] = link
        return link

    def connect_link(self, link: AgentLink) -> bool:
        try:
            session = lw.open_session(link.address, timeout=self.session_timeout)
            events, observables = session.list_events()
        except (lw.ClientError, OSError):
            with self.lock:
                link.state = "lost"
            return False
        with self.lock:
            old = link.session
            link.session = session
            link.state = "connected"
            link.events = events
            link.observables = observables
        if old is not None:
            old.close()
        return True

    def mark_lost(self, link: AgentLink) -> None:
        with self.lock:
            link.state = "lost"
            session, link.session = link.session, None
            orphans = [st for st in self.streams.values()
                       if st.agent_id == link.agent_id]
        if session is not None:
            session.close()
        now = time.time()
        for st in orphans:
            base = st.handle.last_seen_seq + 1 if st.handle is not None else 0
            self.fanout_threadsafe(st.gstream_id,
                                   {"seq": base, "t": now, "kind": "error",
                                    "value": "agent unreachable"})
            self.fanout_threadsafe(st.gstream_id,
                                   {"seq": base + 1, "t": now, "kind": "closed"})

    def probe_link(self, link: AgentLink) -> None:
        session = link.session
        if session is None:
            link.state = "lost"
            return
        try:
            events, observables = session.list_events()
        except lw.ClientError:
            self.mark_lost(link)
            return
        with self.lock:
            link.events = events
            link.observables = observables

    def _monitor_loop(self) -> None:
        while True:
            with self.lock:
                links = [l for l in self.links.values() if not l.replay]
            for link in links:
                if self._shutdown.is_set():
                    return
                if link.state == "connected":
                    self.probe_link(link)
                else:
                    self.connect_link(link)
            if self._shutdown.wait(self.retry_interval):
                return

    def start(self, loop: asyncio.AbstractEventLoop) -> None:
        self.loop = loop
        self._monitor = threading.Thread(target=self._monitor_loop, daemon=True)
        self._monitor.start()

    def shutdown(self) -> None:
        self._shutdown.set()
        with self.lock:
            streams = list(self.streams.values())
            links = list(self.links.values())
        for st in streams:
            st.stop.set()
        for link in links:
            if link.session is not None:
                link.session.close()
        if self._monitor is not None:
            self._monitor.join(timeout=2)

    # --- stream fan-out ----------------------------------------------------

    def fanout_threadsafe(self, gid: str, msg: Dict[str, Any]) -> None:
        loop = self.loop
        if loop is None or loop.is_closed():
            return
        try:
            loop.call_soon_threadsafe(self._fanout, gid, msg)
        except RuntimeError:
            pass  # loop already shut down

    def _fanout(self, gid: str, msg: Dict[str, Any]) -> None:
        with self.lock:
            st = self.streams.get(gid)
        if st is None:
            return
        enriched = {**msg, "agent_id": st.agent_id, "gstream_id": gid}
        for client in list(self.clients):
            if client.wants(gid):
                client.offer(gid, enriched)
        if msg.get("kind") == "closed":
            with self.lock:
                self.streams.pop(gid, None)

    # --- replays -------------------------------------------------------------

    def start_replay(self, path: str, speed) -> Dict[str, str]:
        header = ps.read_header(path)
        with self.lock:
            agent_id = f"replay:{next(self._replay_ids)}"
            link = AgentLink(agent_id, path, replay=True)
            link.events = [header["event"]]
            self.links[agent_id] = link
            gid = f"g{next(self._gids)}"
            st = GatewayStream(gid, agent_id, header["event"], header["query"])
            self.streams[gid] = st
        worker = threading.Thread(
            target=self._replay_pump, args=(st, link, path, speed), daemon=True
        )
        worker.start()
        return {"gstream_id": gid, "agent_id": agent_id}

    def _replay_pump(self, st: GatewayStream, link: AgentLink, path: str,
                     speed) -> None:
        last_seq = -1
        closed_seen = False
        try:
            for msg in ps.replay(path, speed, sleep=st.stop.wait):
                if st.stop.is_set():
                    break
                last_seq = max(last_seq, msg.get("seq", -1))
                if msg.get("kind") == "closed":
                    closed_seen = True
                self.fanout_threadsafe(st.gstream_id, msg)
        except (ps.PersistenceError, OSError) as e:
            last_seq += 1
            self.fanout_threadsafe(st.gstream_id,
                                   {"seq": last_seq, "t": time.time(),
                                    "kind": "error", "value": str(e)})
        finally:
            if not closed_seen:
                self.fanout_threadsafe(st.gstream_id,
                                       {"seq": last_seq + 1, "t": time.time(),
                                        "kind": "closed"})
            with self.lock:
                link.state = "lost"


def _error(status: int, code: str, message: str = "") -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"code": code, "message": message})


def _require_str(body: Dict[str, Any], field: str) -> str:
    v = body.get(field)
    if not isinstance(v, str) or not v:
        raise ValueError(f"field {field!r} must be a non-empty string")
    return v


def create_app(agents=(), retry_interval: float = DEFAULT_RETRY_INTERVAL,
               session_timeout: float = DEFAULT_SESSION_TIMEOUT,
               ws_queue_limit: int = WS_QUEUE_LIMIT) -> FastAPI:
    hub = Hub(retry_interval, session_timeout, ws_queue_limit)
    for address in agents:
        hub.add_link(address)

    @asynccontextmanager
    async def lifespan(app):
        hub.start(asyncio.get_running_loop())
        yield
        hub.shutdown()

    app = FastAPI(lifespan=lifespan)
    app.state.hub = hub
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def bad_body(request, exc):
        return _error(400, "bad_request", str(exc))

    def _live_link(agent_id: str):
        with hub.lock:
            link = hub.links.get(agent_id)
        if link is None:
            return None, _error(404, "unknown_agent", agent_id)
        if link.replay:
            return None, _error(400, "bad_request",
                                "replay sources accept no requests")
        if link.state != "connected" or link.session is None:
            return None, _error(502, "agent_unreachable", link.address)
        return link, None

    @app.get("/agents")
    def get_agents():
        with hub.lock:
            return {"agents": [l.snapshot() for l in hub.links.values()]}

    @app.post("/agents")
    def post_agents(body: Dict[str, Any] = Body(...)):
        try:
            address = _require_str(body, "address")
        except ValueError as e:
            return _error(400, "bad_request", str(e))
        agent_id = body.get("agent_id")
        if agent_id is not None and not isinstance(agent_id, str):
            return _error(400, "bad_request", "agent_id must be a string")
        try:
            link = hub.add_link(address, agent_id)
        except ValueError as e:
            return _error(400, "bad_request", str(e))
        hub.connect_link(link)
        return {"agent_id": link.agent_id, "state": link.state}

    @app.get("/agents/{agent_id}/events")
    def get_agent_events(agent_id: str):
        with hub.lock:
            link = hub.links.get(agent_id)
            if link is None:
                return _error(404, "unknown_agent", agent_id)
            return {"events": list(link.events),
                    "observables": list(link.observables)}

    @app.post("/streams")
    def post_streams(body: Dict[str, Any] = Body(...)):
        try:
            agent_id = _require_str(body, "agent_id")
            event = _require_str(body, "event")
            query = _require_str(body, "query")
        except ValueError as e:
            return _error(400, "bad_request", str(e))
        window = body.get("window")
        if window is not None and not isinstance(window, str):
            return _error(400, "bad_request", "window must be a string")
        link, failure = _live_link(agent_id)
        if failure is not None:
            return failure
        with hub.lock:
            gid = f"g{next(hub._gids)}"
            st = GatewayStream(gid, agent_id, event, query)
            hub.streams[gid] = st  # registered before any item can arrive
        try:
            handle = link.session.create_stream(
                event, query, window=window,
                callback=lambda msg, g=gid: hub.fanout_threadsafe(g, msg),
            )
        except lw.AgentError as e:
            with hub.lock:
                hub.streams.pop(gid, None)
            return _error(400, e.code, e.message)
        except lw.ClientError:
            with hub.lock:
                hub.streams.pop(gid, None)
            hub.mark_lost(link)
            return _error(502, "agent_unreachable", link.address)
        st.handle = handle
        st.query = handle.query  # canonical text, window folded in
        return {"gstream_id": gid}

    @app.delete("/streams/{gid}")
    def delete_stream(gid: str):
        with hub.lock:
            st = hub.streams.get(gid)
        if st is None:
            return _error(404, "unknown_stream", gid)
        st.stop.set()
        if st.handle is not None:
            try:
                st.handle.close()
            except lw.ClientError:
                pass
        return {"gstream_id": gid}

    @app.post("/observables")
    def post_observables(body: Dict[str, Any] = Body(...)):
        try:
            agent_id = _require_str(body, "agent_id")
            name = _require_str(body, "name")
        except ValueError as e:
            return _error(400, "bad_request", str(e))
        if "value" not in body:
            return _error(400, "bad_request", "field 'value' is required")
        link, failure = _live_link(agent_id)
        if failure is not None:
            return failure
        value = wire.decode_value(body["value"])
        at_event = body.get("at_event")
        try:
            link.session.set_observable(name, value, at_event=at_event)
        except lw.AgentError as e:
            return _error(400, e.code, e.message)
        except lw.ClientError:
            hub.mark_lost(link)
            return _error(502, "agent_unreachable", link.address)
        return {"name": name}

    @app.post("/replays")
    def post_replays(body: Dict[str, Any] = Body(...)):
        try:
            path = _require_str(body, "path")
        except ValueError as e:
            return _error(400, "bad_request", str(e))
        speed = body.get("speed", "max")
        try:
            if speed != "max":
                if isinstance(speed, bool) or not isinstance(speed, (int, float)):
                    raise ValueError(f"bad speed: {speed!r}")
                if speed <= 0 or speed != speed:
                    raise ValueError(f"bad speed: {speed!r}")
            return hub.start_replay(path, speed)
        except (ps.MalformedHeader, OSError, ValueError) as e:
            return _error(400, "bad_file", str(e))

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        raw = ws.query_params.get("streams", "*")
        wanted = None if raw == "*" else {s for s in raw.split(",") if s}
        client = WsClient(wanted, hub.ws_queue_limit)
        hub.clients.add(client)
        sender = asyncio.ensure_future(_send_loop(ws, client))
        try:
            while True:
                await ws.receive_text()  # inbound ignored; detects disconnect
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            hub.clients.discard(client)
            sender.cancel()
            with suppress(asyncio.CancelledError, Exception):
                await sender

    return app


async def _send_loop(ws: WebSocket, client: WsClient) -> None:
    while True:
        await client.wake.wait()
        client.wake.clear()
        while client.queue:
            gid, msg = client.queue.popleft()
            notice = client.take_owed(gid)
            if notice is not None:
                await ws.send_text(_ws_text(notice))
            await ws.send_text(_ws_text(msg))
        for gid in list(client.owed):
            notice = client.take_owed(gid)
            if notice is not None:
                await ws.send_text(_ws_text(notice))


def _ws_text(msg: Dict[str, Any]) -> str:
    return wire.encode(msg).decode("utf-8").rstrip("\n")


def serve(host: str, port: int, agents=()) -> None:
    """Run the gateway until interrupted. Raises OSError if the port is
    taken."""
    import uvicorn

    app = create_app(agents=agents)
    uvicorn.run(app, host=host, port=port, log_level="warning")

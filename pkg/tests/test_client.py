import socket
import threading
import time

import pytest

from livewatch import client as lw
from livewatch import wire
from livewatch.agent import Agent


class Host:
    """A tiny instrumented host around an Agent. The "ctl" event exists only
    to drain the control queue, so tests can deliver an exact number of
    "batch" events with known observable values."""

    def __init__(self):
        self.state = {"loss": 0.0, "lr": 0.1, "tag": "idle"}
        self.agent = Agent(events=("batch", "epoch", "ctl"))
        self.agent.register_observable("loss", lambda: self.state["loss"])
        self.agent.register_observable(
            "lr", lambda: self.state["lr"], lambda v: self.state.__setitem__("lr", v)
        )
        self.agent.register_observable("tag", lambda: self.state["tag"])
        self.agent.start()
        self.addr = f"127.0.0.1:{self.agent.control_port}"

    def request(self, fn):
        """Run fn (a blocking client call) while pumping control drains."""
        box = {}

        def work():
            try:
                box["value"] = fn()
            except Exception as e:
                box["error"] = e

        th = threading.Thread(target=work)
        th.start()
        while th.is_alive():
            self.agent.notify("ctl")
            time.sleep(0.002)
        th.join()
        if "error" in box:
            raise box["error"]
        return box.get("value")

    def batches(self, losses, group_every=None):
        for i, loss in enumerate(losses):
            self.state["loss"] = float(loss)
            b = group_every is not None and (i + 1) % group_every == 0
            self.agent.notify("batch", group_end=b)

    def stop(self):
        self.agent.stop()


@pytest.fixture
def host():
    h = Host()
    yield h
    h.stop()


def collect(handle, n, timeout=5.0):
    msgs = []
    deadline = time.monotonic() + timeout
    while len(msgs) < n and time.monotonic() < deadline:
        msg = handle.get(timeout=0.2)
        if msg is not None:
            msgs.append(msg)
    return msgs


def test_open_session_and_list_events(host):
    with lw.open_session(host.addr) as session:
        events, observables = host.request(session.list_events)
        assert "batch" in events and "epoch" in events
        assert observables == ["loss", "lr", "tag"]


def test_connect_refused():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    free_port = probe.getsockname()[1]
    probe.close()
    with pytest.raises(lw.ConnectRefused):
        lw.open_session(f"127.0.0.1:{free_port}", timeout=1.0)


def test_protocol_mismatch():
    server = socket.socket()
    server.bind(("127.0.0.1", 0))
    server.listen(1)
    port = server.getsockname()[1]

    def fake_agent():
        conn, _ = server.accept()
        conn.sendall(b'{"type":"hello","proto":2}\n')
        time.sleep(0.2)
        conn.close()

    th = threading.Thread(target=fake_agent, daemon=True)
    th.start()
    with pytest.raises(lw.ProtocolMismatch):
        lw.open_session(f"127.0.0.1:{port}", timeout=2.0)
    server.close()


def test_stream_receives_items_in_order(host):
    with lw.open_session(host.addr) as session:
        handle = host.request(
            lambda: session.create_stream("batch", "map(b -> b.loss)")
        )
        host.batches([0, 1, 2, 3, 4])
        msgs = collect(handle, 5)
        assert [m["value"] for m in msgs] == [0.0, 1.0, 2.0, 3.0, 4.0]
        assert [m["seq"] for m in msgs] == [0, 1, 2, 3, 4]
        assert handle.last_seen_seq == 4


def test_reduce_avg_per_group(host):
    with lw.open_session(host.addr) as session:
        handle = host.request(
            lambda: session.create_stream("batch", "reduce(avg, b -> b.loss)")
        )
        host.batches(range(10), group_every=5)
        msgs = collect(handle, 2)
        assert [m["value"] for m in msgs] == [2.0, 7.0]


def test_window_argument_appends_stage(host):
    with lw.open_session(host.addr) as session:
        handle = host.request(
            lambda: session.create_stream(
                "batch", "reduce(sum, b -> b.loss)", window="count=3"
            )
        )
        assert "window(count=3)" in handle.query
        host.batches([1, 1, 1, 1, 1, 1])
        msgs = collect(handle, 2)
        assert [m["value"] for m in msgs] == [3.0, 3.0]


def test_agent_errors_surface_with_codes(host):
    with lw.open_session(host.addr) as session:
        with pytest.raises(lw.AgentError) as e:
            host.request(lambda: session.create_stream("batch", "map(b -> "))
        assert e.value.code == "parse_error"
        with pytest.raises(lw.AgentError) as e:
            host.request(lambda: session.create_stream("nope", "map(b -> b.loss)"))
        assert e.value.code == "unknown_event"
        with pytest.raises(lw.AgentError) as e:
            host.request(lambda: session.set_observable("loss", 9.0))
        assert e.value.code == "readonly"


def test_set_observable_changes_next_pull(host):
    with lw.open_session(host.addr) as session:
        handle = host.request(
            lambda: session.create_stream("batch", "map(b -> b.lr)")
        )
        host.agent.notify("batch")
        host.request(lambda: session.set_observable("lr", 0.5))
        host.agent.notify("batch")
        msgs = collect(handle, 2)
        assert [m["value"] for m in msgs] == [0.1, 0.5]
        assert host.state["lr"] == 0.5


def test_callback_mode(host):
    got = []
    with lw.open_session(host.addr) as session:
        host.request(
            lambda: session.create_stream(
                "batch", "map(b -> b.loss)", callback=got.append
            )
        )
        host.batches([7, 8])
        deadline = time.monotonic() + 5
        while len(got) < 2 and time.monotonic() < deadline:
            time.sleep(0.01)
        assert [m["value"] for m in got] == [7.0, 8.0]


def test_sinks_fan_out_and_isolate_failures(host):
    seen1, seen2 = [], []

    def bad_sink(msg):
        raise RuntimeError("sink exploded")

    with lw.open_session(host.addr) as session:
        handle = host.request(
            lambda: session.create_stream("batch", "map(b -> b.loss)")
        )
        lw.route_to_sink(handle, seen1.append)
        lw.route_to_sink(handle, bad_sink)
        lw.route_to_sink(handle, seen2.append)
        host.batches([1, 2, 3])
        msgs = collect(handle, 3)
        assert len(msgs) == 3
        assert [m["value"] for m in seen1] == [1.0, 2.0, 3.0]
        assert [m["value"] for m in seen2] == [1.0, 2.0, 3.0]
        assert len(handle.sink_errors) == 1
        assert "sink exploded" in handle.sink_errors[0]


def test_late_sink_sees_only_later_items(host):
    late = []
    with lw.open_session(host.addr) as session:
        handle = host.request(
            lambda: session.create_stream("batch", "map(b -> b.loss)")
        )
        host.batches([0, 1, 2])
        assert len(collect(handle, 3)) == 3
        lw.route_to_sink(handle, late.append)
        host.batches([3, 4])
        collect(handle, 2)
        assert all(m["seq"] >= 3 for m in late)
        assert [m["value"] for m in late] == [3.0, 4.0]


def test_close_is_terminal(host):
    with lw.open_session(host.addr) as session:
        handle = host.request(
            lambda: session.create_stream("batch", "map(b -> b.loss)")
        )
        host.batches([1])
        host.request(handle.close)
        seen = list(handle)
        assert seen[-1]["kind"] == "closed"
        assert handle.closed
        host.batches([2, 3])
        assert handle.get(timeout=0.2) is None


def test_two_sessions_no_cross_talk(host):
    with lw.open_session(host.addr) as s1, lw.open_session(host.addr) as s2:
        h1 = host.request(lambda: s1.create_stream("batch", "map(b -> b.loss)"))
        h2 = host.request(lambda: s2.create_stream("batch", "map(b -> b.lr)"))
        host.batches([5.0] * 50)
        m1 = collect(h1, 50)
        m2 = collect(h2, 50)
        assert len(m1) == 50 and len(m2) == 50
        assert all(m["stream"] == h1.stream_id for m in m1)
        assert all(m["stream"] == h2.stream_id for m in m2)
        assert all(m["value"] == 5.0 for m in m1)
        assert all(m["value"] == 0.1 for m in m2)
        assert [m["seq"] for m in m1] == list(range(50))
        assert [m["seq"] for m in m2] == list(range(50))


def test_agent_stop_delivers_closed(host):
    session = lw.open_session(host.addr)
    handle = host.request(lambda: session.create_stream("batch", "map(b -> b.loss)"))
    host.batches([1])
    host.stop()
    msgs = [m for m in handle]
    assert msgs[-1]["kind"] == "closed"
    session.close()


# --- handle-level units (no network) -----------------------------------------


def make_bare_handle():
    a, b = socket.socketpair()
    b.close()
    return lw.StreamHandle(None, "s1", "batch", "map(b -> b.loss)", None, a)


def test_handle_queue_overflow_injects_dropped_notice(monkeypatch):
    monkeypatch.setattr(lw, "HANDLE_QUEUE_LIMIT", 5)
    handle = make_bare_handle()
    for seq in range(9):
        handle._deliver({"stream": "s1", "seq": seq, "t": 0.0, "kind": "item", "value": seq})
    first = handle.get(timeout=0)
    assert first["kind"] == "dropped"
    assert first["count"] == 4
    assert first["seq"] == 3  # last dropped seq
    rest = [handle.get(timeout=0) for _ in range(5)]
    assert [m["value"] for m in rest] == [4, 5, 6, 7, 8]


def test_handle_connection_lost_synthesizes_error_and_closed():
    handle = make_bare_handle()
    handle._deliver({"stream": "s1", "seq": 0, "t": 0.0, "kind": "item", "value": 1})
    handle._connection_lost()
    kinds = [handle.get(timeout=0)["kind"] for _ in range(3)]
    assert kinds == ["item", "error", "closed"]
    assert handle.closed
    assert handle.get(timeout=0) is None

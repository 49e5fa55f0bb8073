import json
import random
import socket

import pytest

from livewatch import client as lw
from livewatch import persistence as ps
from livewatch import wire

from test_wire import random_value


def body_bytes(path):
    data = open(path, "rb").read()
    return data.split(b"\n", 1)[1]


def random_messages(rng, n):
    """A plausible recorded delivery sequence with strictly increasing seq."""
    msgs = []
    t = rng.uniform(0, 100.0)
    seq = 0
    for _ in range(n):
        t += rng.uniform(0, 0.5)
        roll = rng.random()
        if roll < 0.8:
            msg = {"seq": seq, "t": t, "kind": "item",
                   "value": random_value(rng, depth=2)}
        elif roll < 0.9:
            msg = {"seq": seq, "t": t, "kind": "error", "value": "divide by zero"}
        else:
            msg = {"seq": seq, "t": t, "kind": "dropped", "count": rng.randint(1, 50),
                   }
        msgs.append(msg)
        seq += rng.randint(1, 3)
    msgs.append({"seq": seq, "t": t + 0.1, "kind": "closed"})
    return msgs


def write_file(path, msgs, event="batch", query="map(b -> b.loss)"):
    rec = ps.Recorder(path, event, query, created=123.0)
    for m in msgs:
        rec(m)
    rec.close()


def test_header_written_immediately(tmp_path):
    path = tmp_path / "run.twstream"
    rec = ps.Recorder(path, "batch", "reduce(avg, b -> b.loss)")
    lines = open(path, "r", encoding="utf-8").read().splitlines()
    assert len(lines) == 1
    header = json.loads(lines[0])
    assert header["format"] == "twstream"
    assert header["version"] == 1
    assert header["event"] == "batch"
    assert header["query"] == "reduce(avg, b -> b.loss)"
    assert isinstance(header["created"], float)
    rec.close()
    assert ps.read_header(path)["event"] == "batch"


def test_record_and_replay_preserve_items(tmp_path):
    path = tmp_path / "run.twstream"
    msgs = [
        {"stream": "s1", "seq": 0, "t": 1.0, "kind": "item", "value": 3.5},
        {"stream": "s1", "seq": 1, "t": 2.0, "kind": "item", "value": {"a": [1, 2]}},
        {"stream": "s1", "seq": 2, "t": 2.5, "kind": "closed"},
    ]
    write_file(path, msgs)
    out = list(ps.replay(path, "max"))
    assert [m["seq"] for m in out] == [0, 1, 2]
    assert [m["t"] for m in out] == [1.0, 2.0, 2.5]
    assert out[0]["value"] == 3.5
    assert out[1]["value"] == {"a": [1, 2]}
    assert out[2]["kind"] == "closed"
    assert all("stream" not in m for m in out)


def test_replay_then_rerecord_is_byte_identical(tmp_path):
    rng = random.Random(1402)
    for case in range(25):
        first = tmp_path / f"a{case}.twstream"
        second = tmp_path / f"b{case}.twstream"
        write_file(first, random_messages(rng, rng.randint(0, 40)))
        rec = ps.Recorder(second, "batch", "map(b -> b.loss)", created=123.0)
        for msg in ps.replay(first, "max"):
            rec(msg)
        rec.close()
        assert body_bytes(first) == body_bytes(second)


def test_rerecord_truncates(tmp_path):
    path = tmp_path / "run.twstream"
    write_file(path, [{"seq": 0, "t": 1.0, "kind": "item", "value": 1}] * 1)
    assert len(open(path, "rb").read().splitlines()) == 2
    rec = ps.Recorder(path, "batch", "map(b -> b.loss)")
    rec.close()
    assert len(open(path, "rb").read().splitlines()) == 1


def test_partial_trailing_line_ignored(tmp_path):
    path = tmp_path / "run.twstream"
    write_file(path, [
        {"seq": 0, "t": 1.0, "kind": "item", "value": 1},
        {"seq": 1, "t": 2.0, "kind": "item", "value": 2},
    ])
    with open(path, "ab") as f:
        f.write(b'{"seq":2,"t":3.0,"kind":"it')
    out = list(ps.replay(path, "max"))
    assert [m["value"] for m in out] == [1, 2]


def test_malformed_line_stops_and_reports_line_no(tmp_path):
    path = tmp_path / "run.twstream"
    write_file(path, [
        {"seq": 0, "t": 1.0, "kind": "item", "value": 1},
        {"seq": 1, "t": 2.0, "kind": "item", "value": 2},
    ])
    with open(path, "ab") as f:
        f.write(b"not json at all\n")
        f.write(wire.encode({"seq": 3, "t": 4.0, "kind": "item", "value": 4}))
    got = []
    with pytest.raises(ps.MalformedLine) as e:
        for msg in ps.replay(path, "max"):
            got.append(msg["value"])
    assert got == [1, 2]
    assert e.value.line_no == 4


def test_control_line_in_body_is_malformed(tmp_path):
    path = tmp_path / "run.twstream"
    write_file(path, [{"seq": 0, "t": 1.0, "kind": "item", "value": 1}])
    with open(path, "ab") as f:
        f.write(b'{"type":"list_events"}\n')
    with pytest.raises(ps.MalformedLine) as e:
        list(ps.replay(path, "max"))
    assert e.value.line_no == 3


def test_bad_headers(tmp_path):
    cases = [
        b"",
        b'{"format":"twstream","version":1,"event":"e","query":"q","created":1}',
        b"garbage\n",
        b'["not","an","object"]\n',
        b'{"format":"other","version":1,"event":"e","query":"q","created":1}\n',
        b'{"format":"twstream","version":2,"event":"e","query":"q","created":1}\n',
        b'{"format":"twstream","version":1,"query":"q","created":1}\n',
        b'{"format":"twstream","version":1,"event":"e","query":"q","created":true}\n',
    ]
    for i, raw in enumerate(cases):
        path = tmp_path / f"bad{i}.twstream"
        path.write_bytes(raw)
        with pytest.raises(ps.MalformedHeader):
            list(ps.replay(path, "max"))
        with pytest.raises(ps.MalformedHeader):
            ps.read_header(path)


def test_speed_validation_is_eager(tmp_path):
    path = tmp_path / "run.twstream"
    write_file(path, [])
    for bad in (0, -1, "fast", float("nan"), None, True):
        with pytest.raises(ValueError):
            ps.replay(path, bad)


def test_replay_pacing_divides_deltas_by_speed(tmp_path):
    path = tmp_path / "run.twstream"
    write_file(path, [
        {"seq": 0, "t": 10.0, "kind": "item", "value": 0},
        {"seq": 1, "t": 11.0, "kind": "item", "value": 1},
        {"seq": 2, "t": 13.0, "kind": "item", "value": 2},
    ])
    slept = []
    out = list(ps.replay(path, 2, sleep=slept.append))
    assert len(out) == 3
    assert slept == [0.5, 1.0]
    slept.clear()
    list(ps.replay(path, "max", sleep=slept.append))
    assert slept == []


def test_replay_pacing_ignores_backwards_time(tmp_path):
    path = tmp_path / "run.twstream"
    write_file(path, [
        {"seq": 0, "t": 10.0, "kind": "item", "value": 0},
        {"seq": 1, "t": 9.0, "kind": "item", "value": 1},
    ])
    slept = []
    assert len(list(ps.replay(path, 1, sleep=slept.append))) == 2
    assert slept == []


def make_bare_handle():
    a, b = socket.socketpair()
    b.close()
    return lw.StreamHandle(None, "s1", "batch", "map(b -> b.loss)", None, a)


def test_record_attaches_to_handle(tmp_path):
    path = tmp_path / "run.twstream"
    handle = make_bare_handle()
    rec = ps.record(handle, path)
    for seq, v in enumerate([1.5, 2.5]):
        handle._deliver({"stream": "s1", "seq": seq, "t": float(seq), "kind": "item",
                         "value": v})
    handle._deliver({"stream": "s1", "seq": 2, "t": 2.0, "kind": "closed"})
    rec.close()
    header = ps.read_header(path)
    assert header["query"] == "map(b -> b.loss)"
    out = list(ps.replay(path, "max"))
    assert [m.get("value") for m in out] == [1.5, 2.5, None]
    assert out[-1]["kind"] == "closed"


def test_failing_recorder_detaches_like_any_sink(tmp_path):
    path = tmp_path / "run.twstream"
    handle = make_bare_handle()
    rec = ps.record(handle, path)
    handle._deliver({"stream": "s1", "seq": 0, "t": 0.0, "kind": "item", "value": 1})
    rec._file.close()  # simulate the disk going away
    handle._deliver({"stream": "s1", "seq": 1, "t": 1.0, "kind": "item", "value": 2})
    handle._deliver({"stream": "s1", "seq": 2, "t": 2.0, "kind": "item", "value": 3})
    assert len(handle.sink_errors) == 1
    assert [handle.get(timeout=0)["value"] for _ in range(3)] == [1, 2, 3]
    assert rec.lines_written == 1

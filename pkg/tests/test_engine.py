import random

import pytest

from livewatch.dsl import parse
from livewatch.dsl_eval import EvalError
from livewatch.engine import (
    SILENT,
    Emit,
    Error,
    StreamItem,
    create_stream_processor,
)
from oracles import emissions_equal, expected_emissions, random_sequence


def run(query, items):
    """Post items, return the per-post outputs plus the flush output."""
    proc = create_stream_processor(parse(query))
    outs = [proc.post(it) for it in items]
    return outs, proc.flush()


def item(value, b=False, seq=0, t=0.0):
    return StreamItem(value=value, group_end=b, seq=seq, t_wall=t)


def test_avg_group_example():
    outs, flush = run(
        "reduce(avg, b -> b.loss)",
        [
            item({"loss": 1.0}),
            item({"loss": 2.0}),
            item({"loss": 3.0}, b=True),
        ],
    )
    assert outs == [SILENT, SILENT, Emit(2.0)]
    assert flush == SILENT


def test_where_map_example():
    outs, flush = run(
        "where(b -> b.i % 2 == 0) | map(b -> b.i)",
        [item({"i": 0}), item({"i": 1}), item({"i": 2})],
    )
    assert outs == [Emit(0), SILENT, Emit(2)]
    assert flush == SILENT


def test_no_reduce_emits_in_post_order():
    values = [{"v": i} for i in range(20)]
    outs, _ = run("map(b -> b.v * 10)", [item(v, b=(i % 3 == 0)) for i, v in enumerate(values)])
    assert [o.value for o in outs] == [i * 10 for i in range(20)]


def test_count_window_emits_every_n():
    outs, flush = run(
        "reduce(sum, b -> b.n) | window(count=3)",
        [item({"n": 1}) for _ in range(7)],
    )
    assert outs == [SILENT, SILENT, Emit(3), SILENT, SILENT, Emit(3), SILENT]
    assert flush == Emit(1)


def test_flush_partial_count_window():
    outs, flush = run(
        "reduce(sum, b -> b.n) | window(count=5)",
        [item({"n": 1}) for _ in range(3)],
    )
    assert outs == [SILENT] * 3
    assert flush == Emit(3)


def test_flush_group_mode_drops_open_group():
    outs, flush = run("reduce(avg, b -> b.x)", [item({"x": 5.0})])
    assert outs == [SILENT]
    assert flush == SILENT


def test_flush_empty_count_reduce():
    proc = create_stream_processor(parse("reduce(count)"))
    assert proc.flush() == SILENT


def test_empty_group_is_silent():
    # B arrives while the accumulator is empty: nothing to emit
    outs, _ = run(
        "where(b -> b.keep) | reduce(count)",
        [item({"keep": False}, b=True), item({"keep": True}, b=True)],
    )
    assert outs == [SILENT, Emit(1)]


def test_where_dropped_item_still_closes_group():
    outs, _ = run(
        "where(b -> b.keep) | map(b -> b.v) | reduce(sum, x -> x)",
        [
            item({"keep": True, "v": 2}),
            item({"keep": False, "v": 100}, b=True),  # dropped but closes
            item({"keep": True, "v": 5}, b=True),
        ],
    )
    assert outs == [SILENT, Emit(2), Emit(5)]


def test_group_end_item_belongs_to_its_group():
    outs, _ = run(
        "reduce(last, b -> b.v)",
        [item({"v": 1}), item({"v": 2}, b=True), item({"v": 3}, b=True)],
    )
    assert outs == [SILENT, Emit(2), Emit(3)]


def test_count_window_ignores_b_flags():
    outs, flush = run(
        "reduce(count) | window(count=2)",
        [item({}, b=True), item({}, b=True), item({}, b=True)],
    )
    assert outs == [SILENT, Emit(2), SILENT]
    assert flush == Emit(1)


def test_time_window_closes_before_folding_new_item():
    outs, flush = run(
        "reduce(sum, b -> b.n) | window(seconds=10)",
        [
            item({"n": 1}, t=100.0),
            item({"n": 2}, t=105.0),
            item({"n": 4}, t=110.0),  # >= 100+10: closes [1,2], starts new window
            item({"n": 8}, t=119.9),
            item({"n": 16}, t=121.0),  # >= 110+10: closes [4,8]
        ],
    )
    assert outs == [SILENT, SILENT, Emit(3), SILENT, Emit(12)]
    assert flush == Emit(16)


def test_time_window_restarts_at_first_accepted_item():
    # long gap: the window anchors at the next accepted item, not at start+T
    outs, flush = run(
        "reduce(count) | window(seconds=5)",
        [item({}, t=0.0), item({}, t=100.0), item({}, t=104.0), item({}, t=105.0)],
    )
    assert outs == [SILENT, Emit(1), SILENT, Emit(2)]
    assert flush == Emit(1)


def test_error_output_and_accumulator_isolation():
    items = [
        item({"v": 1}),
        item({"bad": True}, b=True),  # map fails: no fold, no group close
        item({"v": 2}, b=True),
    ]
    outs, _ = run("reduce(sum, b -> b.v)", items)
    assert outs[0] == SILENT
    assert isinstance(outs[1], Error)
    assert isinstance(outs[1].error, EvalError)
    assert outs[2] == Emit(3)  # both good items are in the same group


def test_error_never_changes_future_emissions():
    good = [item({"v": float(i)}, b=(i == 4)) for i in range(5)]
    with_error = good[:2] + [item({"v": "oops"}, b=False)] + good[2:]
    plain_outs, _ = run("reduce(avg, b -> b.v)", good)
    mixed_outs, _ = run("reduce(avg, b -> b.v)", with_error)
    assert [o for o in plain_outs if isinstance(o, Emit)] == [
        o for o in mixed_outs if isinstance(o, Emit)
    ]


def test_where_predicate_must_be_bool():
    outs, _ = run("where(b -> b.v)", [item({"v": 1})])
    assert isinstance(outs[0], Error)


def test_non_numeric_sample_errors():
    for agg in ["sum", "avg", "min", "max", "hist[4]"]:
        outs, _ = run(f"reduce({agg}, b -> b.v)", [item({"v": "s"})])
        assert isinstance(outs[0], Error), agg


def test_last_accepts_any_kind():
    outs, _ = run(
        "reduce(last, b -> b.v)",
        [item({"v": "text"}), item({"v": [1, 2]}, b=True)],
    )
    assert outs == [SILENT, Emit([1, 2])]


def test_bare_identifiers_read_event_scope():
    outs, _ = run("map(b -> b.loss + lr)", [item({"loss": 1.0, "lr": 0.5})])
    assert outs == [Emit(1.5)]


def test_hist_shape_and_counts():
    items = [item({"v": float(v)}, b=(v == 8)) for v in [0, 1, 2, 3, 4, 5, 6, 7, 8]]
    outs, _ = run("reduce(hist[4], b -> b.v)", items)
    emit = outs[-1]
    assert isinstance(emit, Emit)
    rec = emit.value
    assert set(rec) == {"edges", "counts"}
    assert rec["edges"] == [0.0, 2.0, 4.0, 6.0, 8.0]
    assert rec["counts"] == [2, 2, 2, 3]  # half-open bins, last closed
    assert sum(rec["counts"]) == 9
    assert all(isinstance(c, int) for c in rec["counts"])
    assert all(isinstance(e, float) for e in rec["edges"])


def test_hist_degenerate_single_bin():
    outs, _ = run(
        "reduce(hist[8], b -> b.v)",
        [item({"v": 3.0}), item({"v": 3.0}, b=True)],
    )
    rec = outs[-1].value
    assert rec["edges"] == [3.0, 4.0]
    assert rec["counts"] == [2]


def test_accumulator_resets_after_emission():
    outs, _ = run(
        "reduce(sum, b -> b.v)",
        [item({"v": 1}, b=True), item({"v": 2}, b=True), item({"v": 3}, b=True)],
    )
    assert outs == [Emit(1), Emit(2), Emit(3)]


def test_exactly_once_per_group():
    rng = random.Random(99)
    items = [
        item({"v": rng.random(), "keep": rng.random() < 0.7}, b=rng.random() < 0.2, t=float(i))
        for i in range(400)
    ]
    proc = create_stream_processor(
        parse("where(b -> b.keep) | map(b -> b.v) | reduce(count) | window(group)")
    )
    emits = 0
    samples_in_group = 0
    expected_emits = 0
    for it in items:
        if it.value["keep"]:
            samples_in_group += 1
        if it.group_end:
            if samples_in_group:
                expected_emits += 1
            samples_in_group = 0
        if isinstance(proc.post(it), Emit):
            emits += 1
    assert emits == expected_emits


def test_randomized_against_brute_force_oracle():
    rng = random.Random(2977)
    aggs = [("sum", None), ("avg", None), ("min", None), ("max", None),
            ("count", None), ("last", None), ("hist", 5)]
    for case in range(150):
        n = rng.randrange(0, 60)
        raw = random_sequence(rng, n)
        for agg, bins in aggs:
            for mode in ["group", "count", "seconds"]:
                mode_arg = None
                if mode == "count":
                    mode_arg = rng.randrange(1, 10)
                    win = f"count={mode_arg}"
                elif mode == "seconds":
                    mode_arg = rng.uniform(0.5, 20.0)
                    win = f"seconds={mode_arg!r}"
                else:
                    win = "group"
                agg_text = f"hist[{bins}]" if agg == "hist" else agg
                lam = "" if agg == "count" else ", x -> x"
                query = f"where(b -> b.keep) | map(b -> b.v) | reduce({agg_text}{lam}) | window({win})"
                proc = create_stream_processor(parse(query))
                got = []
                for i, (v, keep, b, t) in enumerate(raw):
                    out = proc.post(StreamItem({"v": v, "keep": keep}, b, i, t))
                    assert not isinstance(out, Error)
                    if isinstance(out, Emit):
                        got.append(out.value)
                tail = proc.flush()
                if isinstance(tail, Emit):
                    got.append(tail.value)
                want = expected_emissions(raw, agg, bins, mode, mode_arg)
                assert emissions_equal(got, want), (query, case)

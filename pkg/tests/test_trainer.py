import math

import numpy as np
import pytest

from livewatch import wire
from livewatch.agent import Agent, _Subscriber
from livewatch.trainer import (
    ConfigError,
    Trainer,
    TrainerConfig,
    attach,
    gradient_check,
    run,
    run_loop,
    validate,
)
from livewatch.values import ensure_value

# frozen from one reference run of seed=42, epochs=10, batches_per_epoch=50
GOLDEN_FIRST_EPOCH_LOSS = 0.16955489861344084
GOLDEN_FINAL_EPOCH_LOSS = 0.011116092319679593

SMALL = dict(seed=5, epochs=3, batches_per_epoch=4, batch_size=8,
             layer_sizes=(4, 6, 1), learning_rate=0.1)


def tap(agent, streams="*"):
    sub = _Subscriber(None, streams, agent.queue_limit)
    agent._add_subscriber(sub)
    return sub


def emitted(sub, stream_id):
    out = []
    for entry in sub.queue:
        msg = wire.decode(entry[3])
        if msg["stream"] == stream_id and msg["kind"] == "item":
            out.append(msg["value"])
    return out


def create(agent, event, query, stream_id):
    r = agent.handle_control(
        {"type": "create_stream", "event": event, "query": query,
         "stream_id": stream_id}
    )
    assert r["type"] == "ok", r
    return stream_id


def rel_close(a, b, tol):
    return abs(a - b) <= tol * max(abs(a), abs(b), 1.0)


def test_config_validation():
    validate(TrainerConfig())
    bad = [
        dict(seed=-1),
        dict(seed=2**64),
        dict(seed=1.5),
        dict(seed=True),
        dict(epochs=0),
        dict(batches_per_epoch=-2),
        dict(batch_size=0),
        dict(epochs=True),
        dict(layer_sizes=(5,)),
        dict(layer_sizes=(4, 0, 1)),
        dict(layer_sizes=(4, 2.0, 1)),
        dict(learning_rate=0.0),
        dict(learning_rate=-0.1),
        dict(learning_rate=float("nan")),
        dict(learning_rate=float("inf")),
        dict(learning_rate=True),
        dict(stop_requested=1),
    ]
    for kw in bad:
        with pytest.raises(ConfigError):
            validate(TrainerConfig(**kw))


def test_batch_metrics_shape_and_value_compatibility():
    t = Trainer(TrainerConfig(**SMALL))
    t.run_batch(0, 0)
    layers = len(SMALL["layer_sizes"]) - 1
    assert len(t.grad_abs_mean) == layers
    assert len(t.weight_abs_mean) == layers
    assert t.loss >= 0.0
    assert set(t.sample_pred) == {"input", "predicted", "target"}
    assert len(t.sample_pred["input"]) == SMALL["layer_sizes"][0]
    record = {
        "epoch": t.epoch, "batch": t.batch, "loss": t.loss,
        "duration": t.duration, "grad_abs_mean": t.grad_abs_mean,
        "weight_abs_mean": t.weight_abs_mean, "sample_pred": t.sample_pred,
        "lr": t.lr, "stop_requested": t.stop_requested,
    }
    ensure_value(record)


def test_backprop_matches_test_side_finite_differences():
    # independent central-difference check, not routed through gradient_check
    t = Trainer(TrainerConfig(layer_sizes=(2, 3, 1), seed=7, batch_size=4))
    x, y = t.make_batch()
    _, grads, _ = t.loss_and_grads(x, y)
    h = 1e-5
    worst = 0.0
    for layer in range(len(t.weights)):
        for arr, grad in ((t.weights[layer], grads[layer][0]),
                          (t.biases[layer], grads[layer][1])):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                keep = arr[idx]
                arr[idx] = keep + h
                hi = t.mse(x, y)
                arr[idx] = keep - h
                lo = t.mse(x, y)
                arr[idx] = keep
                numeric = (hi - lo) / (2 * h)
                analytic = float(np.asarray(grad)[idx])
                err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
                worst = max(worst, err)
    assert worst < 1e-4


def test_gradient_check_small_net():
    cfg = TrainerConfig(layer_sizes=(2, 3, 1), seed=7, batch_size=4)
    err = gradient_check(cfg)
    assert isinstance(err, float)
    assert err < 1e-4
    assert gradient_check(cfg) == err


def test_zero_network_zero_targets_gives_exact_zero_grads():
    t = Trainer(TrainerConfig(layer_sizes=(2, 3, 1), seed=7, batch_size=4))
    for w in t.weights:
        w[:] = 0.0
    x, _ = t.make_batch()
    y = np.zeros((x.shape[0], 1))
    _, grads, _ = t.loss_and_grads(x, y)
    for dw, db in grads:
        assert np.all(dw == 0.0)
        assert np.all(db == 0.0)


def test_bit_determinism_across_runs():
    s1 = run(TrainerConfig(**SMALL), Agent(events=()))
    s2 = run(TrainerConfig(**SMALL), Agent(events=()))
    assert s1 == s2  # float-exact, not approximate
    t1, t2 = Trainer(TrainerConfig(**SMALL)), Trainer(TrainerConfig(**SMALL))
    for epoch in range(SMALL["epochs"]):
        for batch in range(SMALL["batches_per_epoch"]):
            t1.run_batch(epoch, batch)
            t2.run_batch(epoch, batch)
    assert t1.losses == t2.losses
    assert all(np.array_equal(w1, w2) for w1, w2 in zip(t1.weights, t2.weights))


def test_golden_run_improves():
    agent = Agent(events=())
    summary = run(TrainerConfig(seed=42, epochs=10, batches_per_epoch=50), agent)
    assert summary["epochs_completed"] == 10
    assert summary["batches_run"] == 500
    assert summary["final_epoch_loss"] < summary["first_epoch_loss"]
    assert rel_close(summary["first_epoch_loss"], GOLDEN_FIRST_EPOCH_LOSS, 1e-9)
    assert rel_close(summary["final_epoch_loss"], GOLDEN_FINAL_EPOCH_LOSS, 1e-9)
    assert summary["stopped_early"] is False


def test_avg_stream_emits_one_item_per_epoch():
    agent = Agent(events=("batch", "epoch"))
    sub = tap(agent)
    trainer = Trainer(TrainerConfig(**SMALL))
    attach(trainer, agent)
    create(agent, "batch", "reduce(avg, b -> b.loss)", "avg")
    create(agent, "epoch", "map(b -> b.epoch_loss)", "el")
    summary = run_loop(trainer, agent)
    avgs = emitted(sub, "avg")
    echoes = emitted(sub, "el")
    assert len(avgs) == SMALL["epochs"]
    assert len(echoes) == SMALL["epochs"]
    per_epoch = [
        trainer.losses[i:i + SMALL["batches_per_epoch"]]
        for i in range(0, len(trainer.losses), SMALL["batches_per_epoch"])
    ]
    for got, chunk in zip(avgs, per_epoch):
        assert rel_close(got, sum(chunk) / len(chunk), 1e-9)
    for got, want in zip(echoes, trainer.epoch_losses):
        assert got == want
    assert summary["epochs_completed"] == SMALL["epochs"]


class StopInjectingAgent(Agent):
    """Queues set_observable(stop_requested=true) just before the Nth batch
    notify, so it is drained and applied inside that same notify."""

    def __init__(self, trigger, **kw):
        super().__init__(**kw)
        self.trigger = trigger
        self.batch_notifies = 0

    def notify(self, event_name, group_end=False):
        if event_name == "batch":
            self.batch_notifies += 1
            if self.batch_notifies == self.trigger:
                self._enqueue_control(
                    {"type": "set_observable", "name": "stop_requested",
                     "value": True},
                    None,
                    lambda line: None,
                )
        super().notify(event_name, group_end)


def test_stop_requested_exits_before_next_batch():
    agent = StopInjectingAgent(6, events=("batch", "epoch"))
    summary = run(TrainerConfig(**SMALL), agent)
    # trigger fires during epoch 1 (0-based), batch 1; the very next
    # boundary check exits, so epoch 1 never finishes
    assert summary["batches_run"] == 6
    assert summary["epochs_completed"] == 1
    assert summary["stopped_early"] is True


def test_stop_after_final_batch_of_epoch_still_emits_that_epoch():
    agent = StopInjectingAgent(8, events=("batch", "epoch"))
    sub = tap(agent)
    trainer = Trainer(TrainerConfig(**SMALL))
    attach(trainer, agent)
    create(agent, "batch", "reduce(avg, b -> b.loss)", "avg")
    summary = run_loop(trainer, agent)
    assert summary["batches_run"] == 8
    assert summary["epochs_completed"] == 2
    assert len(emitted(sub, "avg")) == 2


def test_lr_mutation_changes_next_step():
    base = TrainerConfig(**SMALL)
    t1, t2 = Trainer(base), Trainer(base)
    t1.run_batch(0, 0)
    t2.run_batch(0, 0)
    assert t1.losses == t2.losses
    t2.set_lr(0.5)
    t1.run_batch(0, 1)
    t2.run_batch(0, 1)
    assert t1.losses[1] == t2.losses[1]  # loss computed before the update
    assert not all(np.array_equal(a, b) for a, b in zip(t1.weights, t2.weights))
    t1.run_batch(0, 2)
    t2.run_batch(0, 2)
    assert t1.losses[2] != t2.losses[2]


def test_setter_validation():
    t = Trainer(TrainerConfig(**SMALL))
    for bad in (0, -1.0, float("nan"), "fast", True):
        with pytest.raises(ValueError):
            t.set_lr(bad)
    with pytest.raises(ValueError):
        t.set_stop(1)
    t.set_lr(0.25)
    assert t.lr == 0.25
    t.set_stop(True)
    assert t.stop_requested is True


def test_lr_visible_through_agent_pull():
    agent = Agent(events=("batch", "epoch"))
    sub = tap(agent)
    trainer = Trainer(TrainerConfig(**SMALL))
    attach(trainer, agent)
    create(agent, "batch", "map(b -> b.lr)", "lr")
    trainer.run_batch(0, 0)
    agent.notify("batch")
    agent.handle_control(
        {"type": "set_observable", "name": "lr", "value": 0.02}
    )
    assert agent._pending  # held until the next notify
    trainer.run_batch(0, 1)
    agent.notify("batch")
    assert emitted(sub, "lr") == [0.1, 0.02]
    assert trainer.lr == 0.02


def test_epoch_event_groups_are_single_item():
    agent = Agent(events=("batch", "epoch"))
    sub = tap(agent)
    trainer = Trainer(TrainerConfig(**SMALL))
    attach(trainer, agent)
    create(agent, "epoch", "reduce(last, b -> b.epoch)", "ep")
    run_loop(trainer, agent)
    assert emitted(sub, "ep") == [0, 1, 2]

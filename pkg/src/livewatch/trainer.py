"""Deterministic training-loop host: a small MLP on synthetic regression
data, instrumented with an embedded agent.

The loop fires notify("batch") after every batch (group_end on the last
batch of each epoch) and notify("epoch", group_end=True) after each
completed epoch. Every metric below is a registered observable, plus "lr"
and "stop_requested" which also have setters so they can be changed live.
All randomness flows through one seeded generator in a fixed consumption
order, so equal configs give bit-equal loss sequences; only "duration" and
wall timestamps vary between runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

NOISE_SCALE = 0.05

Array = np.ndarray


class ConfigError(ValueError):
    pass


@dataclass
class TrainerConfig:
    seed: int = 42
    epochs: int = 10
    batches_per_epoch: int = 50
    batch_size: int = 16
    layer_sizes: Sequence[int] = (8, 16, 1)
    learning_rate: float = 0.05
    stop_requested: bool = False


def validate(config: TrainerConfig) -> None:
    seed = config.seed
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    for name in ("epochs", "batches_per_epoch", "batch_size"):
        v = getattr(config, name)
        if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
            raise ConfigError(f"{name} must be a positive integer")
    sizes = list(config.layer_sizes)
    if len(sizes) < 2:
        raise ConfigError("layer_sizes needs an input and an output size")
    for s in sizes:
        if isinstance(s, bool) or not isinstance(s, int) or s <= 0:
            raise ConfigError("layer_sizes entries must be positive integers")
    lr = config.learning_rate
    if isinstance(lr, bool) or not isinstance(lr, (int, float)):
        raise ConfigError("learning_rate must be a positive finite number")
    if not math.isfinite(lr) or lr <= 0:
        raise ConfigError("learning_rate must be a positive finite number")
    if not isinstance(config.stop_requested, bool):
        raise ConfigError("stop_requested must be a boolean")


def _target(x: Array, n_out: int) -> Array:
    # fixed smooth function of the inputs; one phase-shifted column per output
    base = x.mean(axis=1)
    cols = [np.sin(math.pi * base + 0.5 * j) + 0.3 * base * base for j in range(n_out)]
    return np.stack(cols, axis=1)


class Trainer:
    """Owns the network, the data generator, and the metric state the
    observables read. tanh hidden layers, linear output, plain SGD."""

    def __init__(self, config: TrainerConfig):
        validate(config)
        self.config = config
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        sizes = list(config.layer_sizes)
        self.weights: List[Array] = []
        self.biases: List[Array] = []
        for n_in, n_out in zip(sizes, sizes[1:]):
            scale = 1.0 / math.sqrt(n_in)
            self.weights.append(self.rng.uniform(-scale, scale, (n_in, n_out)))
            self.biases.append(np.zeros(n_out))
        self.lr = float(config.learning_rate)
        self.stop_requested = bool(config.stop_requested)
        # per-batch metric state, refreshed by run_batch
        self.epoch = 0
        self.batch = 0
        self.loss = 0.0
        self.duration = 0.0
        self.grad_abs_mean = [0.0] * len(self.weights)
        self.weight_abs_mean = [0.0] * len(self.weights)
        self.sample_pred: Dict[str, Any] = {"input": [], "predicted": 0.0,
                                            "target": 0.0}
        self.epoch_loss = 0.0  # mean loss of the last completed epoch
        self.losses: List[float] = []
        self.epoch_losses: List[float] = []

    # --- numerics ---------------------------------------------------------

    def make_batch(self) -> Tuple[Array, Array]:
        cfg = self.config
        x = self.rng.uniform(-1.0, 1.0, (cfg.batch_size, cfg.layer_sizes[0]))
        y = _target(x, cfg.layer_sizes[-1])
        y = y + NOISE_SCALE * self.rng.standard_normal(y.shape)
        return x, y

    def forward(self, x: Array) -> List[Array]:
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return acts

    def mse(self, x: Array, y: Array) -> float:
        diff = self.forward(x)[-1] - y
        return float(np.mean(diff * diff))

    def loss_and_grads(self, x, y) -> Tuple[float, List[Tuple[Array, Array]], Array]:
        acts = self.forward(x)
        out = acts[-1]
        diff = out - y
        loss = float(np.mean(diff * diff))
        delta = (2.0 / diff.size) * diff
        grads: List[Tuple[Array, Array]] = []
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append((acts[i].T @ delta, delta.sum(axis=0)))
            if i > 0:
                # tanh' (z) expressed through the cached activation
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] * acts[i])
        grads.reverse()
        return loss, grads, out

    def sgd_step(self, grads: List[Tuple[Array, Array]]) -> None:
        for i, (dw, db) in enumerate(grads):
            self.weights[i] -= self.lr * dw
            self.biases[i] -= self.lr * db

    # --- loop -------------------------------------------------------------

    def run_batch(self, epoch: int, batch: int) -> None:
        started = time.perf_counter()
        x, y = self.make_batch()
        loss, grads, out = self.loss_and_grads(x, y)
        self.sgd_step(grads)
        pick = int(self.rng.integers(self.config.batch_size))
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        self.losses.append(loss)
        self.grad_abs_mean = [
            float((np.abs(dw).sum() + np.abs(db).sum()) / (dw.size + db.size))
            for dw, db in grads
        ]
        self.weight_abs_mean = [
            float((np.abs(w).sum() + np.abs(b).sum()) / (w.size + b.size))
            for w, b in zip(self.weights, self.biases)
        ]
        self.sample_pred = {
            "input": [float(v) for v in x[pick]],
            "predicted": float(out[pick, 0]),
            "target": float(y[pick, 0]),
        }
        self.duration = time.perf_counter() - started

    # --- live mutation ------------------------------------------------------

    def set_lr(self, value) -> None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError("lr must be a positive number")
        if not math.isfinite(value) or value <= 0:
            raise ValueError("lr must be a positive number")
        self.lr = float(value)

    def set_stop(self, value) -> None:
        if not isinstance(value, bool):
            raise ValueError("stop_requested must be a boolean")
        self.stop_requested = value


def attach(trainer: Trainer, agent) -> None:
    """Register the trainer's events and observables on an agent."""
    agent.declare_event("batch")
    agent.declare_event("epoch")
    agent.register_observable("epoch", lambda: trainer.epoch)
    agent.register_observable("batch", lambda: trainer.batch)
    agent.register_observable("loss", lambda: trainer.loss)
    agent.register_observable("duration", lambda: trainer.duration)
    agent.register_observable("grad_abs_mean", lambda: list(trainer.grad_abs_mean))
    agent.register_observable("weight_abs_mean", lambda: list(trainer.weight_abs_mean))
    agent.register_observable("sample_pred", lambda: dict(trainer.sample_pred))
    agent.register_observable("lr", lambda: trainer.lr, trainer.set_lr)
    agent.register_observable("stop_requested", lambda: trainer.stop_requested,
                              trainer.set_stop)
    agent.register_observable("epoch_loss", lambda: trainer.epoch_loss)


def run(config: TrainerConfig, agent) -> Dict[str, Any]:
    """Train to completion (or cooperative stop); returns a summary record."""
    trainer = Trainer(config)
    attach(trainer, agent)
    return run_loop(trainer, agent)


def run_loop(trainer: Trainer, agent) -> Dict[str, Any]:
    """Drive an already-attached trainer; separated from run() so callers
    can set up streams between registration and the first batch."""
    config = trainer.config
    stopped = False
    for epoch in range(config.epochs):
        if trainer.stop_requested:
            stopped = True
            break
        for batch in range(config.batches_per_epoch):
            if trainer.stop_requested:
                stopped = True
                break
            trainer.run_batch(epoch, batch)
            agent.notify("batch",
                         group_end=batch == config.batches_per_epoch - 1)
        if stopped:
            break
        recent = trainer.losses[-config.batches_per_epoch:]
        trainer.epoch_loss = float(sum(recent) / len(recent))
        trainer.epoch_losses.append(trainer.epoch_loss)
        agent.notify("epoch", group_end=True)
    done = trainer.epoch_losses
    return {
        "epochs_completed": len(done),
        "batches_run": len(trainer.losses),
        "first_epoch_loss": done[0] if done else float("nan"),
        "final_epoch_loss": done[-1] if done else float("nan"),
        "stopped_early": stopped,
    }


def gradient_check(config: TrainerConfig, step: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences
    over every parameter, on one batch of a freshly seeded trainer."""
    trainer = Trainer(config)
    x, y = trainer.make_batch()
    _, grads, _ = trainer.loss_and_grads(x, y)
    worst = 0.0
    for i in range(len(trainer.weights)):
        for arr, grad in ((trainer.weights[i], grads[i][0]),
                          (trainer.biases[i], grads[i][1])):
            flat = arr.reshape(-1)
            gflat = np.asarray(grad).reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                hi = trainer.mse(x, y)
                flat[j] = orig - step
                lo = trainer.mse(x, y)
                flat[j] = orig
                numeric = (hi - lo) / (2.0 * step)
                denom = max(abs(gflat[j]) + abs(numeric), 1e-8)
                worst = max(worst, abs(gflat[j] - numeric) / denom)
    return float(worst)

"""Minimal optimizer stack: SGD with Nesterov momentum, LR schedules, losses.

The Nesterov update is pinned to one variant so runs reproduce exactly::

    d = grad + weight_decay * w
    v = momentum * v - lr * d
    w = w + momentum * v - lr * d

Weight decay touches only the trainable mixing weights; frozen transform
arrays never enter the optimizer.  All updates are deterministic, and the
per-epoch minibatch order comes from a seeded permutation stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("cosine", "exponential", "constant")


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocities: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.learning_rate < 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


def sgd_step(weights: np.ndarray, grads: np.ndarray, state: OptimizerState,
             key: str = "w") -> np.ndarray:
    """One in-place Nesterov step on ``weights``; velocity is kept per ``key``."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != weights.shape:
        raise ValueError(f"gradient shape {g.shape} != weights shape {weights.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError(f"non-finite gradient for parameter {key!r}")
    v = state.velocities.get(key)
    if v is None:
        v = np.zeros_like(weights)
    d = g + state.weight_decay * weights
    v = state.momentum * v - state.learning_rate * d
    weights += state.momentum * v - state.learning_rate * d
    state.velocities[key] = v
    return weights


@dataclass(frozen=True)
class Schedule:
    kind: str
    initial_lr: float
    final_lr: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.initial_lr < 0.0 or self.final_lr < 0.0:
            raise ValueError("learning rates must be non-negative")
        if self.kind == "exponential" and (
            self.initial_lr == 0.0 or self.final_lr == 0.0
        ):
            raise ValueError("exponential schedule needs strictly positive rates")


def schedule_lr(schedule: Schedule, step: int) -> float:
    if not 0 <= step < schedule.total_steps:
        raise ValueError(
            f"step {step} outside [0, {schedule.total_steps})"
        )
    frac = step / schedule.total_steps
    if schedule.kind == "constant":
        return schedule.initial_lr
    if schedule.kind == "cosine":
        return schedule.final_lr + (schedule.initial_lr - schedule.final_lr) * (
            1.0 + math.cos(math.pi * frac)
        ) / 2.0
    return schedule.initial_lr * (schedule.final_lr / schedule.initial_lr) ** frac


def cross_entropy(logits, labels):
    """Mean negative log softmax at the label; returns (loss, grad_logits)."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2:
        raise ValueError(f"logits must be (n, classes), got {z.shape}")
    if y.shape != (z.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match batch {z.shape[0]}")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError("label outside class range")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    n = z.shape[0]
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))
    softmax = np.exp(shifted) / np.exp(log_norm)[:, None]
    grad = softmax
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def mse_loss(pred, target):
    """Mean squared error over all elements; returns (loss, grad_pred)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    diff = p - t
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    schedule: Schedule
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    step: int
    lr: float
    loss: float
    metric: float


def train_loop(model, inputs, targets, cfg: TrainConfig, loss_fn,
               metric_fn=None) -> list[EpochStats]:
    """Seeded minibatch SGD over the model's trainable arrays.

    ``loss_fn(outputs, batch_targets) -> (loss, grad)``; ``metric_fn(model)``
    is evaluated once per epoch on frozen weights.  The learning rate is
    scheduled per epoch.
    """
    n = inputs.shape[0]
    if targets.shape[0] != n:
        raise ValueError("inputs and targets disagree on sample count")
    if cfg.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    shuffle_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((int(cfg.seed), 0xB41C)))
    )
    state = OptimizerState(0.0, cfg.momentum, cfg.weight_decay)
    history: list[EpochStats] = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg.schedule, epoch) if cfg.epochs else 0.0
        state.learning_rate = lr
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, caches = model.forward(inputs[idx])
            loss, grad = loss_fn(out, targets[idx])
            _, grads = model.backward(caches, grad)
            for key, arr in model.trainable().items():
                sgd_step(arr, grads[key], state, key=key)
            losses.append(loss)
            step += 1
        metric = float(metric_fn(model)) if metric_fn is not None else math.nan
        history.append(EpochStats(epoch, step, lr, float(np.mean(losses)), metric))
    return history


def evaluate_loss(model, inputs, targets, loss_fn, batch_size: int = 256) -> float:
    """Full-pass loss with no updates, in deterministic order."""
    n = inputs.shape[0]
    total = 0.0
    for start in range(0, n, batch_size):
        out = model.predict(inputs[start:start + batch_size])
        loss, _ = loss_fn(out, targets[start:start + batch_size])
        total += loss * min(batch_size, n - start)
    return total / n

"""Multinomial logistic regression trained with Nesterov-momentum SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from noisyal.errors import ValidationError


@dataclass(frozen=True)
class LinearProbeConfig:
    epochs: int = 500
    base_lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    batch_size: int = 100
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValidationError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")

    def with_(self, **changes) -> LinearProbeConfig:
        return replace(self, **changes)


@dataclass
class LinearProbe:
    weights: np.ndarray
    bias: np.ndarray
    training_log: list[float] = field(default_factory=list)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict(x) == np.asarray(y)).mean())


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(W, b, x, y, weight_decay: float = 0.0):
    """Mean cross-entropy plus ``0.5 * weight_decay * ||W||^2`` and its gradient."""
    n = x.shape[0]
    z = x @ W.T + b
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), y])) + 0.5 * weight_decay * float(np.sum(W * W))
    delta = _softmax(z)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return loss, delta.T @ x + weight_decay * W, delta.sum(axis=0)


def lr_at(config: LinearProbeConfig, epoch: int) -> float:
    if config.schedule == "constant":
        return config.base_lr
    return 0.5 * config.base_lr * (1.0 + math.cos(math.pi * epoch / config.epochs))


def train_linear_probe(
    x,
    y,
    config: LinearProbeConfig,
    class_count: int | None = None,
    epoch_callback: Callable[[int, LinearProbe], None] | None = None,
) -> LinearProbe:
    """Fit softmax(Wx + b) by mini-batch SGD with Nesterov momentum.

    ``epoch_callback(epoch, probe)`` runs after every epoch (1-based) with the
    live probe; filters use it to record margins and checkpoint predictions.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("cannot train a probe on an empty sample set")
    if y.shape != (x.shape[0],):
        raise ValidationError(f"{x.shape[0]} samples but {y.size} labels")
    C = int(class_count if class_count is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= C:
        raise ValidationError(f"labels must lie in [0, {C})")

    rng = np.random.default_rng(config.seed)
    n, d = x.shape
    probe = LinearProbe(rng.normal(0.0, 0.01, size=(C, d)), np.zeros(C))
    vel_w = np.zeros_like(probe.weights)
    vel_b = np.zeros_like(probe.bias)
    bs = min(config.batch_size, n)
    mu = config.momentum
    wd = config.weight_decay

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = rng.permutation(n)
        for start in range(0, n, bs):
            batch = order[start:start + bs]
            _, gw, gb = loss_and_grad(probe.weights, probe.bias, x[batch], y[batch], wd)
            vel_w = mu * vel_w + gw
            vel_b = mu * vel_b + gb
            probe.weights -= lr * (gw + mu * vel_w)
            probe.bias -= lr * (gb + mu * vel_b)
        loss, _, _ = loss_and_grad(probe.weights, probe.bias, x, y, wd)
        probe.training_log.append(loss)
        if epoch_callback is not None:
            epoch_callback(epoch + 1, probe)

    if not (np.all(np.isfinite(probe.weights)) and np.all(np.isfinite(probe.bias))):
        raise FloatingPointError("probe training diverged")
    return probe

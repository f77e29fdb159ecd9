import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisyal.errors import ValidationError
from noisyal.probe import LinearProbeConfig, loss_and_grad, lr_at, train_linear_probe
from oracles import finite_diff, perceptron_separable


def check_gradient(seed, n, d, C, wd):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = rng.integers(0, C, size=n)
    W = rng.normal(size=(C, d))
    b = rng.normal(size=C)
    _, gW, gb = loss_and_grad(W, b, x, y, wd)
    fW = finite_diff(lambda: loss_and_grad(W, b, x, y, wd)[0], W)
    fb = finite_diff(lambda: loss_and_grad(W, b, x, y, wd)[0], b)
    return max(np.abs(gW - fW).max(), np.abs(gb - fb).max())


def test_gradient_toy_3x2():
    assert check_gradient(0, n=3, d=2, C=2, wd=0.0) < 1e-4
    assert check_gradient(1, n=3, d=2, C=3, wd=3e-4) < 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12), d=st.integers(1, 5), C=st.integers(2, 5),
       wd=st.sampled_from([0.0, 3e-4, 0.1]))
def test_gradient_property(seed, n, d, C, wd):
    assert check_gradient(seed, n, d, C, wd) < 1e-4


def test_weight_decay_skips_bias():
    W, b = np.ones((2, 2)), np.full(2, 5.0)
    x, y = np.zeros((1, 2)), np.array([0])
    l0, _, gb0 = loss_and_grad(W, b, x, y, 0.0)
    l1, _, gb1 = loss_and_grad(W, b, x, y, 0.5)
    assert l1 - l0 == pytest.approx(0.5 * 0.5 * 4)
    assert np.array_equal(gb0, gb1)


def test_separable_reaches_full_accuracy():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(0, 0.3, (50, 2)) + [2, 0], rng.normal(0, 0.3, (50, 2)) - [2, 0]])
    y = np.repeat([0, 1], 50)
    assert perceptron_separable(x, y)
    probe = train_linear_probe(x, y, LinearProbeConfig(epochs=200))
    assert probe.accuracy(x, y) == 1.0


def test_single_sample():
    probe = train_linear_probe(np.array([[0.3, -1.0]]), np.array([2]), LinearProbeConfig(epochs=20), class_count=4)
    assert probe.predict(np.array([[0.3, -1.0]]))[0] == 2


def test_training_loss_trends_down():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(300, 8))
    y = (x[:, 0] + 0.5 * rng.normal(size=300) > 0).astype(int) + 2 * (x[:, 1] > 0)
    probe = train_linear_probe(x, y, LinearProbeConfig(epochs=100))
    log = np.array(probe.training_log)
    assert log.size == 100
    smooth = log.reshape(10, 10).mean(axis=1)
    assert np.all(np.diff(smooth) <= 1e-9)


def test_nesterov_step_by_hand():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    y = np.array([0, 1, 2, 1])
    cfg = LinearProbeConfig(epochs=2, base_lr=0.1, momentum=0.9, weight_decay=0.01, batch_size=4, schedule="constant")
    probe = train_linear_probe(x, y, cfg)
    # replay: full batch, so the shuffle does not matter
    init = np.random.default_rng(0).normal(0.0, 0.01, size=(3, 3))
    W, b = init.copy(), np.zeros(3)
    vW, vb = np.zeros_like(W), np.zeros(3)
    for _ in range(2):
        _, gW, gb = loss_and_grad(W, b, x, y, 0.01)
        vW, vb = 0.9 * vW + gW, 0.9 * vb + gb
        W, b = W - 0.1 * (gW + 0.9 * vW), b - 0.1 * (gb + 0.9 * vb)
    assert np.allclose(probe.weights, W) and np.allclose(probe.bias, b)


def test_cosine_schedule():
    cfg = LinearProbeConfig(epochs=10, base_lr=0.2)
    assert lr_at(cfg, 0) == pytest.approx(0.2)
    assert lr_at(cfg, 5) == pytest.approx(0.1)
    assert lr_at(cfg, 9) == pytest.approx(0.1 * (1 + math.cos(math.pi * 0.9)))
    assert lr_at(cfg.with_(schedule="constant"), 9) == 0.2


def test_callback_sees_every_epoch():
    seen = []
    train_linear_probe(np.eye(3), np.arange(3), LinearProbeConfig(epochs=4), epoch_callback=lambda e, p: seen.append(e))
    assert seen == [1, 2, 3, 4]


def test_training_is_deterministic():
    x = np.random.default_rng(3).normal(size=(50, 4))
    y = np.arange(50) % 3
    a = train_linear_probe(x, y, LinearProbeConfig(epochs=5, batch_size=8, seed=9))
    b = train_linear_probe(x, y, LinearProbeConfig(epochs=5, batch_size=8, seed=9))
    assert np.array_equal(a.weights, b.weights)


def test_divergence_is_reported():
    x = np.array([[1e200, 1e200], [-1e200, 1e200]])
    with np.errstate(all="ignore"):
        with pytest.raises(FloatingPointError):
            train_linear_probe(x, np.array([0, 1]), LinearProbeConfig(epochs=3, base_lr=10.0))


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"base_lr": 0}, {"momentum": 1.0}, {"batch_size": 0},
                                {"schedule": "step"}])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        LinearProbeConfig(**kw)


def test_input_validation():
    with pytest.raises(ValidationError):
        train_linear_probe(np.empty((0, 2)), np.empty(0, dtype=int), LinearProbeConfig())
    with pytest.raises(ValidationError):
        train_linear_probe(np.ones((2, 2)), np.array([0, 3]), LinearProbeConfig(), class_count=2)

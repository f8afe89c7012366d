import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leafcount.optim import (COUNTNET_ADAM, SEGNET_SGD, OptimizerConfig, OptimizerState, adam_step,
                             config_for_epoch, sgd_step)


def _p(v):
    return {"w": np.array([float(v)])}


def test_paper_presets():
    assert (SEGNET_SGD.lr, SEGNET_SGD.momentum, SEGNET_SGD.weight_decay) == (0.01, 0.9, 0.0001)
    assert (COUNTNET_ADAM.kind, COUNTNET_ADAM.lr, COUNTNET_ADAM.weight_decay) == ("adam", 0.0001, 0.0001)


def test_plain_sgd():
    cfg = OptimizerConfig("sgd_momentum", lr=0.1, momentum=0.0, weight_decay=0.0)
    p = _p(1.0)
    sgd_step(p, {"w": np.array([0.5])}, OptimizerState(), cfg)
    assert p["w"][0] == pytest.approx(1.0 - 0.05, abs=1e-15)


def test_sgd_fixed_point():
    cfg = OptimizerConfig("sgd_momentum", lr=0.1, momentum=0.9, weight_decay=0.0)
    p = _p(2.0)
    sgd_step(p, {"w": np.array([0.0])}, OptimizerState(), cfg)
    assert p["w"][0] == 2.0


def test_sgd_two_step_unroll():
    lr, g = 0.01, 0.7
    cfg = OptimizerConfig("sgd_momentum", lr=lr, momentum=0.9, weight_decay=0.0)
    p, s = _p(0.0), OptimizerState()
    for _ in range(2):
        sgd_step(p, {"w": np.array([g])}, s, cfg)
    assert p["w"][0] == pytest.approx(-lr * (g + 1.9 * g), rel=1e-12)


def test_sgd_weight_decay_coupled():
    cfg = OptimizerConfig("sgd_momentum", lr=0.1, momentum=0.0, weight_decay=0.5)
    p = _p(2.0)
    sgd_step(p, {"w": np.array([0.0])}, OptimizerState(), cfg)
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 1.0)


def test_adam_first_step_sign():
    cfg = OptimizerConfig("adam", lr=1e-3, weight_decay=0.0)
    for g in (3.0, -0.02, 1e4):
        p = _p(0.0)
        adam_step(p, {"w": np.array([g])}, OptimizerState(), cfg)
        assert p["w"][0] == pytest.approx(-1e-3 * np.sign(g), rel=1e-5)


def test_adam_zero_grad_unchanged():
    p = _p(1.5)
    adam_step(p, {"w": np.array([0.0])}, OptimizerState(), OptimizerConfig("adam", lr=1e-3, weight_decay=0.0))
    assert p["w"][0] == 1.5


def test_adam_three_steps_unrolled():
    lr, b1, b2, eps, g = 0.01, 0.9, 0.999, 1e-8, 0.3
    cfg = OptimizerConfig("adam", lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=0.0)
    p, s = _p(1.0), OptimizerState()
    for _ in range(3):
        adam_step(p, {"w": np.array([g])}, s, cfg)
    x, m, v = 1.0, 0.0, 0.0
    for t in (1, 2, 3):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    assert abs(p["w"][0] - x) < 1e-12
    assert s.step == 3


@given(st.floats(-1e6, 1e6).filter(lambda g: abs(g) > 1e-30), st.integers(1, 5))
@settings(max_examples=50, deadline=None)
def test_adam_step_bounded_by_lr(g, steps):
    cfg = OptimizerConfig("adam", lr=1e-3, weight_decay=0.0)
    p, s = _p(0.0), OptimizerState()
    for _ in range(steps):
        before = p["w"][0]
        adam_step(p, {"w": np.array([g])}, s, cfg)
        assert abs(p["w"][0] - before) <= 1e-3 * (1 + 1e-6)


def test_tiny_lr_leaves_params():
    for cfg in (OptimizerConfig("adam", lr=1e-300), OptimizerConfig("sgd_momentum", lr=1e-300)):
        p = _p(1.0)
        step_fn = adam_step if cfg.kind == "adam" else sgd_step
        step_fn(p, {"w": np.array([5.0])}, OptimizerState(), cfg)
        assert p["w"][0] == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        sgd_step(_p(0), {"w": np.zeros(2)}, OptimizerState(), SEGNET_SGD)


@pytest.mark.parametrize("kw", [dict(lr=0), dict(momentum=1.0), dict(beta1=1.0), dict(kind="rmsprop")])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        OptimizerConfig(**kw)


def test_schedule():
    sched = [(10, {"lr": 0.001}), (0, {"momentum": 0.5}), (20, {"lr": 1e-4})]
    assert config_for_epoch(SEGNET_SGD, sched, 0).lr == 0.01
    assert config_for_epoch(SEGNET_SGD, sched, 0).momentum == 0.5
    assert config_for_epoch(SEGNET_SGD, sched, 15).lr == 0.001
    assert config_for_epoch(SEGNET_SGD, sched, 25).lr == 1e-4
    with pytest.raises(ValueError):
        config_for_epoch(SEGNET_SGD, [(0, {"bogus": 1})], 1)

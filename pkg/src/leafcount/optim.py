"""SGD with momentum and Adam, both with coupled L2 weight decay.

Parameters, gradients and optimizer buffers are dicts of arrays keyed by
parameter name.  Steps update the parameter arrays in place so layers that
hold references see the new values.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

KINDS = ("sgd_momentum", "adam")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd_momentum"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"adam betas must be in (0, 1), got {self.beta1}, {self.beta2}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("weight_decay must be >= 0 and eps > 0")

    def with_overrides(self, **overrides) -> "OptimizerConfig":
        unknown = set(overrides) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ValueError(f"unknown optimizer keys: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)


# Values used for the two networks' training runs.
SEGNET_SGD = OptimizerConfig("sgd_momentum", lr=0.01, momentum=0.9, weight_decay=1e-4)
COUNTNET_ADAM = OptimizerConfig("adam", lr=1e-4, weight_decay=1e-4)


@dataclass
class OptimizerState:
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    step: int = 0


def _check(params: Mapping, grads: Mapping) -> None:
    for name, p in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if grads[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {p.shape} vs grad {grads[name].shape}")


def sgd_step(params, grads, state: OptimizerState, config: OptimizerConfig) -> OptimizerState:
    _check(params, grads)
    for name, p in params.items():
        g = grads[name] + config.weight_decay * p
        buf = state.buffers.setdefault(name, {})
        v = buf.get("velocity")
        v = g if v is None else config.momentum * v + g
        buf["velocity"] = v.astype(p.dtype, copy=False)
        p -= (config.lr * v).astype(p.dtype, copy=False)
    state.step += 1
    return state


def adam_step(params, grads, state: OptimizerState, config: OptimizerConfig) -> OptimizerState:
    _check(params, grads)
    t = state.step + 1
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for name, p in params.items():
        g = grads[name] + config.weight_decay * p
        buf = state.buffers.setdefault(name, {})
        m = buf.get("m", np.zeros_like(p))
        v = buf.get("v", np.zeros_like(p))
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        buf["m"], buf["v"] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
        update = config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p -= update.astype(p.dtype, copy=False)
    state.step = t
    return state


def step(params, grads, state: OptimizerState, config: OptimizerConfig) -> OptimizerState:
    if config.kind == "adam":
        return adam_step(params, grads, state, config)
    return sgd_step(params, grads, state, config)


def config_for_epoch(base: OptimizerConfig, schedule: Sequence[tuple[int, Mapping]], epoch: int) -> OptimizerConfig:
    """Apply every schedule entry whose epoch is <= ``epoch``, in epoch order."""
    cfg = base
    for start, overrides in sorted(schedule, key=lambda e: e[0]):
        if start <= epoch:
            cfg = cfg.with_overrides(**overrides)
    return cfg

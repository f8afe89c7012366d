"""Tensor plumbing shared by every module.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order.  Image
tensors use ``(C, H, W)`` layout, batched tensors ``(B, C, H, W)``.

Random streams are ``numpy.random.Generator`` instances backed by PCG64 and
seeded through ``SeedSequence(seed, spawn_key=(stream,))``.  PCG64 and the
SeedSequence mixing are specified bit-for-bit by numpy, so a given
``(seed, stream)`` pair produces the same draws on every platform.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

Tensor = np.ndarray

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class NumericError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic generator for one ``(seed, stream)`` pair."""
    if seed < 0 or stream < 0:
        raise ValueError(f"seed and stream must be non-negative, got {seed}, {stream}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def check_finite(x: Tensor, where: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericError(f"{where}: {bad} non-finite value(s)")
    return x


def fan_in_out(shape: Sequence[int]) -> tuple[int, int]:
    """Fans for an (out, in) matrix or an (out, in, kh, kw) kernel."""
    if len(shape) < 2:
        raise ValueError(f"need at least 2 dims to compute fans, got shape {tuple(shape)}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape: Sequence[int], rng: np.random.Generator, dtype=TRAIN_DTYPE) -> Tensor:
    """Uniform Xavier/Glorot init, bound ``sqrt(6 / (fan_in + fan_out))``."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"zero-sized shape {shape}")
    fan_in, fan_out = fan_in_out(shape)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=shape)
    # float32 rounding can land a hair outside the bound
    return np.clip(w, -bound, bound).astype(dtype)


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def binary_op(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Elementwise ``add``/``sub``/``mul`` on equal shapes; never broadcasts."""
    if op not in _BINARY:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_BINARY)}")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        out = _BINARY[op](a, b)
    return check_finite(out, f"binary_op[{op}]")


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major offset of ``index`` inside ``shape``."""
    if len(shape) != len(index):
        raise ValueError(f"index {tuple(index)} does not match rank of {tuple(shape)}")
    off = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise IndexError(f"index {tuple(index)} out of bounds for {tuple(shape)}")
        off = off * extent + i
    return off

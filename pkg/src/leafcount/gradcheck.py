"""Central finite-difference checks for hand-written backward passes."""
from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    Only ``coords`` (flat indices) are evaluated when given; the rest of the
    returned array stays zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, coords=None) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if coords is not None:
        a, n = a[coords], n[coords]
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def sample_coords(size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if size <= k:
        return np.arange(size)
    return np.sort(rng.choice(size, k, replace=False))

"""Sequential container holding named layers and their parameter sets."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .layers import Layer
from .tensor import Tensor


class Network:
    """Layers run in order; backward runs them in reverse.

    Parameter names are ``<layer name>.<param name>`` and key the flat
    parameter, gradient and buffer dicts used by optimizers and checkpoints.
    """

    def __init__(self, layers: Iterable[tuple[str, Layer]], arch: dict):
        self.layers = list(layers)
        self.arch = arch
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names")

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    __call__ = forward

    def backward(self, grad: Tensor) -> Tensor:
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
            if grad is None:  # layer skips its input gradient
                break
        return grad

    def _collect(self, attr: str) -> dict[str, Tensor]:
        out = {}
        for lname, layer in self.layers:
            for k, v in getattr(layer, attr).items():
                out[f"{lname}.{k}"] = v
        return out

    def params(self) -> dict[str, Tensor]:
        return self._collect("params")

    def grads(self) -> dict[str, Tensor]:
        return self._collect("grads")

    def buffers(self) -> dict[str, Tensor]:
        return self._collect("buffers")

    def state_dict(self) -> dict[str, Tensor]:
        """Parameters followed by buffers, in layer order."""
        return {**self.params(), **self.buffers()}

    def load_state_dict(self, blobs: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = set(expected) - set(blobs)
        extra = set(blobs) - set(expected)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in expected.items():
            if blobs[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {blobs[name].shape} vs {arr.shape}")
            arr[...] = blobs[name]

    def astype(self, dtype) -> "Network":
        for _, layer in self.layers:
            layer.astype(dtype)
        return self

    def num_params(self) -> int:
        return sum(int(p.size) for p in self.params().values())

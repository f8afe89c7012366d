"""Forward/backward passes for the operators used by both networks.

Every operator exists in two flavours: a pure function pair
(``*_forward`` / ``*_backward``) and a small stateful ``Layer`` wrapper that
caches what the backward pass needs.  Convolution is cross-correlation (no
kernel flip), stride 1.  Pooling is 2x2 with stride 2, floor semantics on odd
sizes, ties resolved to the first maximum in row-major window order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import TRAIN_DTYPE, Tensor, xavier_init

PADDINGS = ("same", "none")


# ---------------------------------------------------------------------------
# convolution


def _pad_amount(kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "none":
        return 0, 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"same padding needs odd kernels, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")


def _im2col(x: Tensor, kh: int, kw: int, ph: int, pw: int):
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    B, C, H, W = x.shape
    ho, wo = H - kh + 1, W - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than (padded) input {H}x{W}")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B,C,ho,wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * ho * wo, C * kh * kw)
    return cols, ho, wo


def _check_conv_shapes(x: Tensor, w: Tensor, b: Tensor | None) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weights, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape} has {x.shape[1]} channels, "
                         f"weights {w.shape} expect {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")


def conv2d_forward(x: Tensor, w: Tensor, b: Tensor, padding: str = "same", *, _return_cols=False):
    """Stride-1 cross-correlation of ``x`` (B,C,H,W) with ``w`` (O,C,kh,kw)."""
    _check_conv_shapes(x, w, b)
    O, _, kh, kw = w.shape
    ph, pw = _pad_amount(kh, kw, padding)
    cols, ho, wo = _im2col(x, kh, kw, ph, pw)
    out = cols @ w.reshape(O, -1).T
    out += b
    out = np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, O).transpose(0, 3, 1, 2))
    if _return_cols:
        return out, cols
    return out


def conv2d_backward(x: Tensor, w: Tensor, grad_out: Tensor, padding: str = "same", *, cols=None,
                    input_grad: bool = True):
    """Gradients ``(grad_input, grad_weights, grad_bias)`` of :func:`conv2d_forward`.

    The input gradient is the full correlation of ``grad_out`` with the
    flipped, channel-transposed kernel; it is ``None`` when ``input_grad`` is
    false.
    """
    _check_conv_shapes(x, w, None)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = _pad_amount(kh, kw, padding)
    ho, wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    if grad_out.shape != (B, O, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output {(B, O, ho, wo)}")
    if cols is None:
        cols, _, _ = _im2col(x, kh, kw, ph, pw)
    go = grad_out.transpose(0, 2, 3, 1).reshape(-1, O)
    grad_w = (go.T @ cols).reshape(w.shape)
    grad_b = go.sum(axis=0)
    grad_x = None
    if input_grad:
        w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gcols, _, _ = _im2col(grad_out, kh, kw, kh - 1 - ph, kw - 1 - pw)
        grad_x = gcols @ w_t.reshape(C, -1).T
        grad_x = np.ascontiguousarray(grad_x.reshape(B, H, W, C).transpose(0, 3, 1, 2))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# pooling


@dataclass
class PoolIndices:
    """Argmax positions of a 2x2 max-pool.

    ``flat`` has the pooled shape (B,C,H',W'); each entry is ``h*W + w`` in
    the pre-pool map of spatial size ``input_hw``.
    """

    flat: np.ndarray
    input_hw: tuple[int, int]

    def validate(self) -> None:
        H, W = self.input_hw
        ho, wo = self.flat.shape[-2:]
        rows, cols = np.divmod(self.flat, W)
        if np.any(rows // 2 != np.arange(ho)[:, None]) or np.any(cols // 2 != np.arange(wo)[None, :]):
            raise ValueError("pool index outside its own 2x2 window")
        if np.any(rows >= H):
            raise ValueError("pool index outside input map")


def maxpool2_forward(x: Tensor) -> tuple[Tensor, PoolIndices]:
    B, C, H, W = x.shape
    if H < 2 or W < 2:
        raise ValueError(f"2x2 pooling needs H,W >= 2, got {H}x{W}")
    ho, wo = H // 2, W // 2
    v = x[:, :, :2 * ho, :2 * wo].reshape(B, C, ho, 2, wo, 2)
    v = v.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, ho, wo, 4)
    arg = v.argmax(axis=-1)  # first max wins; window order is row-major
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
    dr, dc = np.divmod(arg, 2)
    flat = (2 * np.arange(ho)[:, None] + dr) * W + (2 * np.arange(wo)[None, :] + dc)
    return out, PoolIndices(flat.astype(np.int64), (H, W))


def maxunpool2(x: Tensor, indices: PoolIndices, out_shape: tuple[int, int] | None = None) -> Tensor:
    """Scatter ``x`` to the recorded argmax positions; zeros elsewhere."""
    H, W = indices.input_hw if out_shape is None else out_shape
    if x.shape != indices.flat.shape:
        raise ValueError(f"unpool input {x.shape} does not match indices {indices.flat.shape}")
    B, C = x.shape[:2]
    idx = indices.flat.reshape(B, C, -1)
    if idx.size and (idx.min() < 0 or idx.max() >= H * W):
        raise IndexError(f"pool index outside output map {H}x{W}")
    out = np.zeros((B, C, H * W), dtype=x.dtype)
    np.put_along_axis(out, idx, x.reshape(B, C, -1), axis=-1)
    return out.reshape(B, C, H, W)


def maxpool2_backward(grad_out: Tensor, indices: PoolIndices) -> Tensor:
    return maxunpool2(grad_out, indices)


def maxunpool2_backward(grad_out: Tensor, indices: PoolIndices) -> Tensor:
    B, C = grad_out.shape[:2]
    g = np.take_along_axis(grad_out.reshape(B, C, -1), indices.flat.reshape(B, C, -1), axis=-1)
    return g.reshape(indices.flat.shape)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=TRAIN_DTYPE, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)


def batchnorm_forward(x: Tensor, state: BatchNormState, mode: str = "train"):
    """Per-channel normalization over (batch, H, W).

    Returns ``(out, cache)``; the cache feeds :func:`batchnorm_backward`.
    Train mode updates the running statistics in place.
    """
    g = state.gamma.reshape(1, -1, 1, 1)
    b = state.beta.reshape(1, -1, 1, 1)
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ValueError("batchnorm train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var * (n / (n - 1))
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    return xhat * g + b, (xhat, inv_std, mode)


def batchnorm_backward(grad_out: Tensor, state: BatchNormState, cache):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, mode = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * state.gamma.reshape(1, -1, 1, 1)
    inv = inv_std.reshape(1, -1, 1, 1)
    if mode == "eval":
        return dxhat * inv, grad_gamma, grad_beta
    n = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    grad_x = inv / n * (n * dxhat - s1 - xhat * s2)
    return grad_x, grad_gamma, grad_beta


def _channel_window_sum(v: Tensor, n: int) -> Tensor:
    half = n // 2
    C = v.shape[1]
    pad = [(0, 0)] * v.ndim
    pad[1] = (half + 1, half)
    c = np.cumsum(np.pad(v, pad), axis=1)
    return c[:, n:n + C] - c[:, :C]


def lrn_forward(x: Tensor, k: float = 2.0, n: int = 5, alpha: float = 1e-4, beta: float = 0.75) -> Tensor:
    """Across-channel LRN: ``x / (k + alpha/n * sum_window x^2) ** beta``."""
    if n < 1 or n % 2 == 0:
        raise ValueError(f"LRN window must be odd and positive, got {n}")
    scale = k + (alpha / n) * _channel_window_sum(x * x, n)
    return x * scale ** -beta


def lrn_backward(x: Tensor, grad_out: Tensor, k: float = 2.0, n: int = 5,
                 alpha: float = 1e-4, beta: float = 0.75) -> Tensor:
    scale = k + (alpha / n) * _channel_window_sum(x * x, n)
    t = grad_out * x * scale ** (-beta - 1)
    # the window is symmetric, so "c' in window(c)" equals "c in window(c')"
    return grad_out * scale ** -beta - (2 * alpha * beta / n) * x * _channel_window_sum(t, n)


# ---------------------------------------------------------------------------
# pointwise, dense, losses


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    return grad_out * (x > 0)


def fc_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"fc dimension mismatch: input {x.shape}, weights {w.shape}")
    return x @ w.T + b


def fc_backward(x: Tensor, w: Tensor, grad_out: Tensor):
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise ValueError(f"fc grad_out shape {grad_out.shape} does not match {(x.shape[0], w.shape[0])}")
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits: Tensor, axis: int = 1) -> Tensor:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(prob: Tensor, grad_out: Tensor, axis: int = 1) -> Tensor:
    return prob * (grad_out - (grad_out * prob).sum(axis=axis, keepdims=True))


def weighted_spatial_cross_entropy(logits: Tensor, target: Tensor, class_weights=(1.0, 1.0)):
    """Per-pixel softmax cross-entropy weighted by class, normalised by total weight.

    ``logits`` is (B,2,H,W), ``target`` is a binary (B,H,W) mask.  Returns
    ``(loss, grad_logits)``.
    """
    w_bg, w_fg = (float(c) for c in class_weights)
    if w_bg <= 0 or w_fg <= 0:
        raise ValueError(f"class weights must be positive, got {class_weights}")
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ValueError(f"expected (B,2,H,W) logits, got {logits.shape}")
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    t = np.asarray(target)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("target mask must be binary")
    t = t.astype(np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    pix_w = np.where(t == 1, w_fg, w_bg).astype(logits.dtype)
    total = pix_w.sum()
    nll = -np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    loss = float((pix_w * nll).sum() / total)
    grad = np.exp(logp)
    onehot = np.stack([t == 0, t == 1], axis=1)
    grad = (grad - onehot) * (pix_w / total)[:, None]
    return loss, grad.astype(logits.dtype)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0):
    """Mean Huber-style loss with transition at ``|d| = beta``; returns ``(loss, grad)``."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    d = pred - target
    ad = np.abs(d)
    small = ad < beta
    per = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(small, d / beta, np.sign(d)) / d.size
    return float(per.mean()), grad.astype(pred.dtype)


# ---------------------------------------------------------------------------
# stateful wrappers


class Layer:
    """Base class: ``params``/``grads`` share keys; ``buffers`` hold non-learned state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def astype(self, dtype) -> None:
        for d in (self.params, self.grads, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, padding="same", rng=None, dtype=TRAIN_DTYPE,
                 input_grad=True):
        super().__init__()
        _pad_amount(kernel, kernel, padding)
        self.padding = padding
        self.input_grad = input_grad
        shape = (out_channels, in_channels, kernel, kernel)
        w = xavier_init(shape, rng, dtype) if rng is not None else np.zeros(shape, dtype)
        self.params = {"weight": w, "bias": np.zeros(out_channels, dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, train=True):
        out, self._cols = conv2d_forward(x, self.params["weight"], self.params["bias"],
                                         self.padding, _return_cols=True)
        self._x = x
        return out

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._x, self.params["weight"], grad, self.padding, cols=self._cols,
                                     input_grad=self.input_grad)
        self.grads["weight"][...] = gw
        self.grads["bias"][...] = gb
        self._cols = None
        return gx


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=TRAIN_DTYPE):
        super().__init__()
        s = BatchNormState.create(channels, dtype, momentum, eps)
        self.momentum, self.eps = momentum, eps
        self.params = {"gamma": s.gamma, "beta": s.beta}
        self.buffers = {"running_mean": s.running_mean, "running_var": s.running_var}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def state(self) -> BatchNormState:
        return BatchNormState(self.params["gamma"], self.params["beta"], self.buffers["running_mean"],
                              self.buffers["running_var"], self.momentum, self.eps)

    def forward(self, x, train=True):
        out, self._cache = batchnorm_forward(x, self.state, "train" if train else "eval")
        return out

    def backward(self, grad):
        gx, gg, gb = batchnorm_backward(grad, self.state, self._cache)
        self.grads["gamma"][...] = gg
        self.grads["beta"][...] = gb
        return gx


class LRN(Layer):
    def __init__(self, k=2.0, n=5, alpha=1e-4, beta=0.75):
        super().__init__()
        self.k, self.n, self.alpha, self.beta = k, n, alpha, beta

    def forward(self, x, train=True):
        self._x = x
        return lrn_forward(x, self.k, self.n, self.alpha, self.beta)

    def backward(self, grad):
        return lrn_backward(self._x, grad, self.k, self.n, self.alpha, self.beta)


class ReLU(Layer):
    def forward(self, x, train=True):
        self._x = x
        return relu_forward(x)

    def backward(self, grad):
        return relu_backward(self._x, grad)


class MaxPool2(Layer):
    indices: PoolIndices | None = None

    def forward(self, x, train=True):
        out, self.indices = maxpool2_forward(x)
        return out

    def backward(self, grad):
        return maxpool2_backward(grad, self.indices)


class MaxUnpool2(Layer):
    """Unpools with the indices of a paired :class:`MaxPool2`, read at call time."""

    def __init__(self, pool: MaxPool2):
        super().__init__()
        self.pool = pool

    def forward(self, x, train=True):
        self._idx = self.pool.indices
        return maxunpool2(x, self._idx)

    def backward(self, grad):
        return maxunpool2_backward(grad, self._idx)


class Flatten(Layer):
    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None, dtype=TRAIN_DTYPE):
        super().__init__()
        shape = (out_features, in_features)
        w = xavier_init(shape, rng, dtype) if rng is not None else np.zeros(shape, dtype)
        self.params = {"weight": w, "bias": np.zeros(out_features, dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, train=True):
        self._x = x
        return fc_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        gx, gw, gb = fc_backward(self._x, self.params["weight"], grad)
        self.grads["weight"][...] = gw
        self.grads["bias"][...] = gb
        return gx

"""Layer primitives: dense, 3x3 conv, relu, batchnorm2d, pooling, flatten.

Convolutions are fixed at 3x3 kernels, stride 1, padding 1 (the only
configuration the conv family here uses). Batchnorm keeps running statistics
as plain arrays outside the autodiff graph; everything else is a pure
function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor

LAYER_KINDS = (
    "dense",
    "conv2d",
    "relu",
    "batchnorm2d",
    "maxpool2x2",
    "adaptive_avg_pool",
    "flatten",
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class LayerSpec:
    """One layer of a model: a kind from the closed set plus its extents."""

    kind: str
    name: str = ""
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    output_size: int = 1  # adaptive_avg_pool target (output_size x output_size)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind: {self.kind!r}")


class BatchNormState:
    """Running statistics for one batchnorm2d layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.batches_seen = 0

    def reset(self):
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0
        self.batches_seen = 0


# ---- parameter initialization -------------------------------------------

def init_dense(in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
    bound = 1.0 / np.sqrt(in_features)
    w = rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype)
    b = np.zeros(out_features, dtype=dtype)
    return w, b


def init_conv(in_channels: int, out_channels: int, rng: np.random.Generator, dtype=np.float32):
    bound = 1.0 / np.sqrt(in_channels * 9)
    w = rng.uniform(-bound, bound, size=(out_channels, in_channels, 3, 3)).astype(dtype)
    b = np.zeros(out_channels, dtype=dtype)
    return w, b


def init_batchnorm(channels: int, dtype=np.float32):
    return np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype)


# ---- forward/backward kernels ----------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N, in) @ w.T (in, out) + b."""
    if x.data.ndim != 2:
        raise ValueError(f"dense expects 2-D input, got shape {x.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"dense shape mismatch: input {x.data.shape} vs weight {w.data.shape}")
    out = x.data @ w.data.T + b.data

    def backward(g):
        x._accumulate(g @ w.data)
        w._accumulate(g.T @ x.data)
        b._accumulate(g.sum(axis=0))

    return Tensor(out, _parents=(x, w, b), _backward=backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 1, padding 1; output spatial dims equal input."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input, got shape {x.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)
    out = np.einsum("nchwij,fcij->nfhw", win, w.data, optimize=True)
    out += b.data[None, :, None, None]

    def backward(g):
        b._accumulate(g.sum(axis=(0, 2, 3)))
        w._accumulate(np.einsum("nchwij,nfhw->fcij", win, g, optimize=True))
        gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))  # (N, F, H, W, 3, 3)
        wflip = w.data[:, :, ::-1, ::-1]
        x._accumulate(np.einsum("nfhwij,fcij->nchw", gwin, wflip, optimize=True))

    return Tensor(out, _parents=(x, w, b), _backward=backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2 expects 4-D input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    h2, w2 = h // 2, w // 2
    v = (
        x.data[:, :, : h2 * 2, : w2 * 2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = v.argmax(axis=-1)  # ties resolved to the first position: deterministic
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gv = np.zeros_like(v)
        np.put_along_axis(gv, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : h2 * 2, : w2 * 2] = (
            gv.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
        )
        x._accumulate(gx)

    return Tensor(out, _parents=(x,), _backward=backward)


def adaptive_avg_pool(x: Tensor, out_size: int) -> Tensor:
    """Average pooling to a fixed (out_size x out_size) spatial grid."""
    if x.data.ndim != 4:
        raise ValueError(f"adaptive_avg_pool expects 4-D input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    s = out_size
    if s == 1:
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def backward1(g):
            x._accumulate(np.broadcast_to(g / (h * w), x.data.shape).astype(x.data.dtype, copy=False))

        return Tensor(out, _parents=(x,), _backward=backward1)

    def bounds(extent):
        return [(extent * i // s, -(-extent * (i + 1) // s)) for i in range(s)]

    hb, wb = bounds(h), bounds(w)
    out = np.empty((n, c, s, s), dtype=x.data.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                gx[:, :, h0:h1, w0:w1] += (g[:, :, i, j] / ((h1 - h0) * (w1 - w0)))[:, :, None, None]
        x._accumulate(gx)

    return Tensor(out, _parents=(x,), _backward=backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-channel normalization with batch stats (train) or running stats (eval)."""
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d expects 4-D input, got shape {x.data.shape}")
    if x.data.shape[1] != gamma.data.shape[0]:
        raise ValueError(f"batchnorm2d channel mismatch: input {x.data.shape} vs gamma {gamma.data.shape}")
    if mode == "train":
        axes = (0, 2, 3)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        sigma = np.sqrt(var + BN_EPS)
        xhat = (x.data - mu[None, :, None, None]) / sigma[None, :, None, None]
        # running stats track the unbiased variance, outside the graph
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = BN_MOMENTUM
        state.running_mean[:] = (1 - mom) * state.running_mean + mom * mu
        state.running_var[:] = (1 - mom) * state.running_var + mom * unbiased
        state.batches_seen += 1

        def backward(g):
            beta._accumulate(g.sum(axis=axes))
            gamma._accumulate((g * xhat).sum(axis=axes))
            dxhat = g * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            x._accumulate((dxhat - s1 / m - xhat * s2 / m) / sigma[None, :, None, None])

        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        return Tensor(out, _parents=(x, gamma, beta), _backward=backward)

    if mode == "eval":
        if state.batches_seen == 0:
            raise ValueError("batchnorm2d eval before any train step: running stats uninitialized")
        sigma = np.sqrt(state.running_var + BN_EPS)
        xhat = (x.data - state.running_mean[None, :, None, None]) / sigma[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def backward_eval(g):
            beta._accumulate(g.sum(axis=(0, 2, 3)))
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            x._accumulate(g * (gamma.data / sigma)[None, :, None, None])

        return Tensor(out, _parents=(x, gamma, beta), _backward=backward_eval)

    raise ValueError(f"unknown mode: {mode!r}")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.data.shape[0], -1)


def loss_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    num_classes = logits.data.shape[-1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    logp = logits.log_softmax()
    return -(logp.pick(labels).mean())

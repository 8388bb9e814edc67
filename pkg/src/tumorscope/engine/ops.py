"""Differentiable operations on :class:`Tensor`.

Every forward kernel is plain numpy; every backward closure returns one
gradient per input (``None`` for inputs that take no gradient).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, get_default_dtype, make_result

CONV_METHODS = ("im2col", "direct")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise and structural -------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, "add", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, "mul", (a, b), bw)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.asarray(a.data.sum()), "sum", (a,),
                       lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return make_result(np.asarray(a.data.mean()), "mean", (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), "reshape", (a,),
                       lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """[N, ...] -> [N, prod(...)]"""
    return reshape(a, (a.shape[0], -1))


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return make_result(np.array(a.data[index]), "getitem", (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(a.data @ b.data, "matmul", (a, b), bw)


# -- layers ---------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,),
                       lambda g: (g * mask,), {"mask": mask})


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape}, weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"dense bias shape {bias.shape} != ({weights.shape[1]},)")

    def bw(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return make_result(x.data @ weights.data + bias.data, "dense", (x, weights, bias), bw)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0,
           method: str = "im2col") -> Tensor:
    """Cross-correlation of [N,C,H,W] input with [F,C,kh,kw] kernels (no flip).

    ``method="im2col"`` gathers windows into a matrix and runs one GEMM;
    ``method="direct"`` accumulates one shifted slice per kernel tap. Both
    share the same backward.
    """
    if x.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernels, got {x.shape}, {kernels.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernels expect {kc}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({f},)")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if method not in CONV_METHODS:
        raise ValueError(f"unknown conv method {method!r}")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = kernels.data

    if method == "im2col":
        # windows: [N, C, Ho, Wo, kh, kw]
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
        out = (cols @ wd.reshape(f, -1).T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    else:
        out = np.zeros((n, f, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                out += np.einsum("nchw,fc->nfhw", patch, wd[:, :, i, j])
        cols = None
    out = np.ascontiguousarray(out + bias.data.reshape(1, f, 1, 1))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        if cols is not None:
            gk = (g2.T @ cols).reshape(f, c, kh, kw)
        else:
            gk = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                    gk[:, :, i, j] = np.einsum("nfhw,nchw->fc", g, patch)
        gcols = (g2 @ wd.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk, g.sum(axis=(0, 2, 3))

    return make_result(out, "conv2d", (x, kernels, bias), bw,
                       {"stride": stride, "padding": padding, "method": method})


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max over ``window``x``window`` patches. On ties the first element in
    row-major window order wins and receives the whole gradient."""
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if window > h or window > w:
        raise ValueError(f"pool window {window} larger than spatial extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    # flat index into x of each chosen element
    rows = np.arange(ho)[:, None] * stride + arg // window
    cols = np.arange(wo)[None, :] * stride + arg % window
    plane = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None, None]
    target = ((plane * h + rows) * w + cols).ravel()

    def bw(g):
        gx = np.bincount(target, weights=g.ravel(), minlength=x.data.size)
        return (gx.astype(x.dtype).reshape(x.shape),)

    return make_result(np.ascontiguousarray(out), "maxpool2d", (x,), bw,
                       {"window": window, "stride": stride})


def global_average_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_average_pool expects [N,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=(2, 3)), "global_average_pool", (x,), bw)


class BatchNormState:
    """Running per-channel statistics, updated in place by train-mode batchnorm."""

    def __init__(self, channels: int, dtype=None):
        dtype = dtype or get_default_dtype()
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of [N,C,H,W] (or [N,C]) input.

    Train mode uses biased batch statistics and moves the running stats by
    ``running <- (1 - momentum) * running + momentum * batch``.
    """
    if x.ndim not in (2, 4):
        raise ValueError(f"batchnorm expects [N,C] or [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("gamma/beta must have one entry per channel")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    g_ = gamma.data.reshape(bshape)

    if not train:
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean.reshape(bshape)) * inv.reshape(bshape)

        def bw_eval(g):
            return (g * g_ * inv.reshape(bshape),
                    (g * xhat).sum(axis=axes), g.sum(axis=axes))

        out = (xhat * g_ + beta.data.reshape(bshape)).astype(x.dtype)
        return make_result(out, "batchnorm", (x, gamma, beta), bw_eval, {"train": False})

    if x.shape[0] < 2:
        raise ValueError("batchnorm in train mode needs a batch of at least 2")
    m = x.data.size // c
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = (xhat * g_ + beta.data.reshape(bshape)).astype(x.dtype)

    state.mean = ((1 - momentum) * state.mean + momentum * mu).astype(state.mean.dtype)
    state.var = ((1 - momentum) * state.var + momentum * var).astype(state.var.dtype)

    def bw(g):
        gxhat = g * g_
        gx = (inv.reshape(bshape) / m) * (
            m * gxhat
            - gxhat.sum(axis=axes).reshape(bshape)
            - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, "batchnorm", (x, gamma, beta), bw, {"train": True})


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return make_result(x.data.copy(), "dropout", (x,), lambda g: (g,), {"train": False})
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_result(x.data * mask, "dropout", (x,), lambda g: (g * mask,), {"mask": mask})


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits)))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label] (integer labels)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"need {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), "softmax_cross_entropy", (logits,), bw)

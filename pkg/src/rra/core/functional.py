"""Differentiable neural-network primitives built on :mod:`rra.core.tensor`."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _result, as_tensor

ACTIVATIONS = ("relu", "tanh", "linear", "neg_relu")
LOG_FLOOR = 1e-12


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along ``axis``."""
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), backward, "softmax")


def activation(x, kind: str = "relu") -> Tensor:
    """Elementwise ``relu``, ``tanh``, ``linear`` (identity) or ``neg_relu`` = -relu(x).

    ``tanh`` outputs stay strictly inside (-1, 1) even where floating point would round to 1.
    """
    x = as_tensor(x)
    if kind == "relu":
        mask = x.data > 0
        out = np.where(mask, x.data, 0).astype(x.dtype)

        def backward(g):
            x._accumulate(g * mask)

    elif kind == "neg_relu":
        mask = x.data > 0
        out = np.where(mask, -x.data, 0).astype(x.dtype)

        def backward(g):
            x._accumulate(-g * mask)

    elif kind == "tanh":
        # rounding would otherwise reach +-1 exactly for large inputs; keep the range open
        edge = np.nextafter(x.dtype.type(1), x.dtype.type(0))
        out = np.clip(np.tanh(x.data), -edge, edge)

        def backward(g):
            x._accumulate(g * (1.0 - out * out))

    elif kind == "linear":
        out = x.data.copy()

        def backward(g):
            x._accumulate(g)

    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return _result(out, (x,), backward, kind)


def relu(x) -> Tensor:
    return activation(x, "relu")


def tanh(x) -> Tensor:
    return activation(x, "tanh")


class BatchNormState:
    """Affine parameters and running statistics of one batch-norm layer.

    ``momentum`` follows the common convention
    ``running = (1 - momentum) * running + momentum * batch_stat``.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        if not 0 < momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name="beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def train(self):
        self.mode = "train"

    def eval(self):
        self.mode = "eval"

    def parameters(self):
        return [self.gamma, self.beta]


def batchnorm(x, st: BatchNormState, axis: int | None = None) -> Tensor:
    """Per-channel batch normalization.

    ``axis`` is the channel axis (default 0 for a 2-D ``c x m`` input, else 1);
    statistics pool over every other axis. Train mode uses the batch
    statistics and updates the running estimates; eval mode uses the running
    estimates only.
    """
    x = as_tensor(x)
    if axis is None:
        axis = 0 if x.ndim <= 2 else 1
    axis = axis % x.ndim
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    if x.shape[axis] != st.channels:
        raise ValueError(f"batchnorm expects {st.channels} channels, got {x.shape[axis]}")
    m = int(np.prod([x.shape[i] for i in reduce_axes])) if reduce_axes else 1
    gamma = st.gamma.data.reshape(bshape)
    beta = st.beta.data.reshape(bshape)

    if st.mode == "train":
        if m == 0:
            raise ValueError("batchnorm in train mode needs at least one position per channel")
        mu = x.data.mean(axis=reduce_axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=reduce_axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + st.eps)
        xhat = xc * inv_std
        unbiased = var.reshape(-1) * (m / (m - 1)) if m > 1 else var.reshape(-1)
        mom = st.momentum
        st.running_mean = ((1 - mom) * st.running_mean + mom * mu.reshape(-1)).astype(st.running_mean.dtype)
        st.running_var = ((1 - mom) * st.running_var + mom * unbiased).astype(st.running_var.dtype)

        def backward(g):
            if st.gamma.requires_grad:
                st.gamma._accumulate((g * xhat).sum(axis=reduce_axes))
            if st.beta.requires_grad:
                st.beta._accumulate(g.sum(axis=reduce_axes))
            if x.requires_grad:
                gx = g * gamma
                sum_g = gx.sum(axis=reduce_axes, keepdims=True)
                sum_gx = (gx * xhat).sum(axis=reduce_axes, keepdims=True)
                x._accumulate(inv_std * (gx - sum_g / m - xhat * sum_gx / m))

    elif st.mode == "eval":
        inv_std = 1.0 / np.sqrt(st.running_var.reshape(bshape) + st.eps)
        xhat = (x.data - st.running_mean.reshape(bshape)) * inv_std

        def backward(g):
            if st.gamma.requires_grad:
                st.gamma._accumulate((g * xhat).sum(axis=reduce_axes))
            if st.beta.requires_grad:
                st.beta._accumulate(g.sum(axis=reduce_axes))
            if x.requires_grad:
                x._accumulate(g * gamma * inv_std)

    else:
        raise ValueError(f"unknown batchnorm mode {st.mode!r}")

    out = (gamma * xhat + beta).astype(x.dtype)
    return _result(out, (x, st.gamma, st.beta), backward, "batchnorm")


def broadcast_add_channel(X, v) -> Tensor:
    """``out[..., j, p] = X[..., j, p] + v[..., j]``: replicate ``v`` over positions and add."""
    X, v = as_tensor(X), as_tensor(v)
    if X.shape[:-1] != v.shape:
        raise ValueError(f"channel shape mismatch: X {X.shape} vs v {v.shape}")

    def backward(g):
        if X.requires_grad:
            X._accumulate(g)
        if v.requires_grad:
            v._accumulate(g.sum(axis=-1))

    return _result(X.data + v.data[..., None], (X, v), backward, "broadcast_add_channel")


def dropout(x, p: float, training: bool = True, rng=None) -> Tensor:
    """Inverted dropout. ``rng`` is a ``numpy.random.Generator`` or an int seed."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must lie in [0, 1)")
    x = as_tensor(x)
    if not training or p == 0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        x._accumulate(g * keep)

    return _result(x.data * keep, (x,), backward, "dropout")


def cross_entropy(yhat, y, floor: float = LOG_FLOOR) -> Tensor:
    """``-sum_i y_i log(yhat_i)`` over the last axis; leading axes are kept.

    The log argument is clamped at ``floor``. Both inputs must be
    distributions along the last axis.
    """
    yhat = as_tensor(yhat)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=yhat.dtype)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: yhat {yhat.shape} vs y {y.shape}")
    tol = 1e-3 if yhat.dtype == np.float32 else 1e-6
    if np.any(yhat.data < 0) or np.any(np.abs(yhat.data.sum(axis=-1) - 1) > tol):
        raise ValueError("yhat is not a probability distribution")
    if np.any(y < 0) or np.any(np.abs(y.sum(axis=-1) - 1) > tol):
        raise ValueError("y is not a probability distribution")
    clipped = np.maximum(yhat.data, floor)
    out = -(y * np.log(clipped)).sum(axis=-1)

    def backward(g):
        live = yhat.data > floor
        yhat._accumulate(np.where(live, -y / clipped, 0).astype(yhat.dtype) * g[..., None])

    return _result(np.asarray(out, dtype=yhat.dtype), (yhat,), backward, "cross_entropy")


def one_hot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1, axis=-1)
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, ``w`` shaped (out, in, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, cin, H, W = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    p, s = padding, stride
    if H + 2 * p < kh or W + 2 * p < kw:
        raise ValueError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = _windows(xp, kh, kw, s)  # (n, cin, ho, wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])).astype(w.dtype))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcol = np.tensordot(g, w.data, axes=([1], [0]))  # (n, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accumulate(gxp[:, :, p:p + H, p:p + W] if p else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")

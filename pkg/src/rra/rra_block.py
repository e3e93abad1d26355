"""Iterative spatio-temporal attention with channel suppression.

Feature maps are laid out channels-major: ``X`` has shape ``(..., c, P)``
with ``P = n * h * w`` and position index ``p = (frame * h + row) * w + col``.
A leading batch axis is optional everywhere.

One iteration ``k`` does::

    a^k      = softmax(Xbar^k.T @ W_a^k)          # over all P positions jointly
    xhat^k   = Xbar^k @ a^k                       # summary ("glimpse")
    xtilde^k = tanh(W^k xhat^k + b^k)             # per-channel increment, in (-1, 1)
    X^{k+1}  = X^k (+) xtilde^k                   # replicate over positions and add
    Xbar^{k+1} = relu(batchnorm(X^{k+1}))

with ``X^1 = Xbar^1`` = backbone output. The last iteration only produces a
summary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    BatchNormState,
    Tensor,
    activation,
    batchnorm,
    broadcast_add_channel,
    as_tensor,
    matmul,
    softmax,
    transpose,
)

VARIANTS = ("full", "avg_pool", "spatial_attention", "no_bn", "no_relu", "no_tanh", "neg_relu")
# Numbering used by the component ablation table.
ABLATION_ORDER = ("avg_pool", "spatial_attention", "no_bn", "no_relu", "no_tanh", "neg_relu")


@dataclass
class FeatureMapBatch:
    X: Tensor
    Xbar: Tensor
    n: int
    h: int
    w: int

    @property
    def c(self) -> int:
        return self.X.shape[-2]

    @property
    def positions(self) -> int:
        return self.n * self.h * self.w


@dataclass
class GlimpseState:
    """What one attention iteration produced; ``scores``/``yhat`` are filled by the heads."""

    k: int
    a: Tensor
    xhat: Tensor
    xtilde: Tensor | None = None
    scores: Tensor | None = None
    yhat: Tensor | None = None


@dataclass
class RRAParams:
    """Per-iteration attention vectors, reduction FC layers and BN states.

    ``fc_W``, ``fc_b`` and ``bn`` hold ``K - 1`` entries: the final iteration
    never updates the maps. Parallel-glimpse models carry none of them.
    """

    W_a: list[Tensor]
    fc_W: list[Tensor] = field(default_factory=list)
    fc_b: list[Tensor] = field(default_factory=list)
    bn: list[BatchNormState] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.W_a)

    @property
    def c(self) -> int:
        return self.W_a[0].shape[0]

    @classmethod
    def init(cls, c: int, K: int, rng=None, dtype=np.float32, reduction: bool = True) -> "RRAParams":
        if K < 1:
            raise ValueError("K must be >= 1")
        if c < 1:
            raise ValueError("c must be >= 1")
        rng = np.random.default_rng(rng)
        bound = 1.0 / np.sqrt(c)

        def uniform(*shape, name):
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True, name=name)

        W_a = [uniform(c, name=f"W_a{k}") for k in range(K)]
        if not reduction:
            return cls(W_a)
        fc_W = [uniform(c, c, name=f"fc_W{k}") for k in range(K - 1)]
        fc_b = [Tensor(np.zeros(c, dtype=dtype), requires_grad=True, name=f"fc_b{k}") for k in range(K - 1)]
        bn = [BatchNormState(c, dtype=dtype) for _ in range(K - 1)]
        return cls(W_a, fc_W, fc_b, bn)

    def named_parameters(self):
        out = []
        for k, t in enumerate(self.W_a):
            out.append((f"rra.W_a.{k}", t))
        for k, (W, b, bn) in enumerate(zip(self.fc_W, self.fc_b, self.bn)):
            out += [(f"rra.fc_W.{k}", W), (f"rra.fc_b.{k}", b),
                    (f"rra.bn.{k}.gamma", bn.gamma), (f"rra.bn.{k}.beta", bn.beta)]
        return out

    def named_batchnorms(self):
        return [(f"rra.bn.{k}", bn) for k, bn in enumerate(self.bn)]


# ------------------------------------------------------------------ the four ops
def attention_weights(Xbar, W_a) -> Tensor:
    """Softmax of ``Xbar.T @ W_a`` over every position of every frame at once."""
    Xbar, W_a = as_tensor(Xbar), as_tensor(W_a)
    c = W_a.shape[0]
    if Xbar.shape[-2] != c:
        raise ValueError(f"W_a has {c} channels, feature map has {Xbar.shape[-2]}")
    logits = matmul(W_a.reshape(1, c), Xbar)  # (..., 1, P)
    return softmax(logits.reshape(Xbar.shape[:-2] + (Xbar.shape[-1],)), axis=-1)


def summarize(Xbar, a) -> Tensor:
    """Attention-weighted sum of the position feature vectors: ``Xbar @ a``."""
    Xbar, a = as_tensor(Xbar), as_tensor(a)
    if Xbar.shape[-1] != a.shape[-1]:
        raise ValueError("attention length does not match number of positions")
    return matmul(Xbar, a.reshape(a.shape + (1,))).reshape(Xbar.shape[:-1])


def reduction_vector(xhat, W, b, kind: str = "tanh") -> Tensor:
    """``kind(W @ xhat + b)``; ``tanh`` keeps every entry inside (-1, 1)."""
    xhat, W = as_tensor(xhat), as_tensor(W)
    c = xhat.shape[-1]
    z = matmul(xhat.reshape(-1, c), transpose(W)) + b
    return activation(z.reshape(xhat.shape[:-1] + (W.shape[0],)), kind)


def update_feature_maps(X, xtilde, bn: BatchNormState | None, use_relu: bool = True):
    """Return ``(Xbar_next, X_next)`` with ``X_next = X (+) xtilde`` kept pre-normalization.

    ``bn=None`` skips normalization; ``use_relu=False`` skips the threshold.
    """
    X_next = broadcast_add_channel(X, xtilde)
    out = X_next
    if bn is not None:
        out = batchnorm(out, bn, axis=out.ndim - 2)
    if use_relu:
        out = activation(out, "relu")
    return out, X_next


# -------------------------------------------------------------------- variants
def variant_attention(Xbar, W_a, variant: str = "full", n_frames: int | None = None) -> Tensor:
    """Attention weights for a given ablation variant.

    ``avg_pool`` gives uniform weights (equivalent to ``W_a = 0``).
    ``spatial_attention`` runs a softmax inside each frame and averages the
    per-frame summaries, expressed here as per-frame weights divided by ``n``.
    """
    Xbar, W_a = as_tensor(Xbar), as_tensor(W_a)
    if variant == "avg_pool":
        return attention_weights(Xbar, Tensor(np.zeros(W_a.shape, dtype=W_a.dtype)))
    if variant == "spatial_attention":
        if n_frames is None:
            raise ValueError("spatial_attention needs n_frames")
        P = Xbar.shape[-1]
        if P % n_frames:
            raise ValueError("positions not divisible by frame count")
        lead = Xbar.shape[:-2]
        c = W_a.shape[0]
        logits = matmul(W_a.reshape(1, c), Xbar).reshape(lead + (n_frames, P // n_frames))
        a = softmax(logits, axis=-1) * (1.0 / n_frames)
        return a.reshape(lead + (P,))
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return attention_weights(Xbar, W_a)


def ablated_update(X, xhat, W, b, bn: BatchNormState, variant: str = "full"):
    """Reduction vector plus map update with one component swapped or removed.

    Returns ``(Xbar_next, X_next, xtilde)``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    kind = {"no_tanh": "linear", "neg_relu": "neg_relu"}.get(variant, "tanh")
    xtilde = reduction_vector(xhat, W, b, kind)
    Xbar_next, X_next = update_feature_maps(
        X, xtilde,
        bn=None if variant == "no_bn" else bn,
        use_relu=variant != "no_relu",
    )
    return Xbar_next, X_next, xtilde


# ------------------------------------------------------------------- iteration
def run_glimpses(X_initial, params: RRAParams, variant: str = "full", n_frames: int | None = None):
    """Run ``K`` redundancy-reduction iterations; return ``(states, final_Xbar)``."""
    if params.K < 1:
        raise ValueError("K must be >= 1")
    if params.K > 1 and len(params.fc_W) < params.K - 1:
        raise ValueError("params lack reduction layers for K > 1")
    X = Xbar = X_initial
    states: list[GlimpseState] = []
    for k in range(params.K):
        a = variant_attention(Xbar, params.W_a[k], variant, n_frames)
        xhat = summarize(Xbar, a)
        st = GlimpseState(k=k, a=a, xhat=xhat)
        if k < params.K - 1:
            Xbar, X, st.xtilde = ablated_update(X, xhat, params.fc_W[k], params.fc_b[k], params.bn[k], variant)
        states.append(st)
    return states, Xbar


def parallel_glimpses(X_initial, params: RRAParams, variant: str = "full", n_frames: int | None = None):
    """``K`` independent attention heads over the same, never-modified maps."""
    states = []
    for k, W_a in enumerate(params.W_a):
        a = variant_attention(X_initial, W_a, variant, n_frames)
        states.append(GlimpseState(k=k, a=a, xhat=summarize(X_initial, a)))
    return states

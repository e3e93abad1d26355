"""Per-glimpse softmax classifiers, the three multi-glimpse losses, and prediction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Tensor, as_tensor, cross_entropy, dropout, matmul, softmax, transpose

LOSS_TOKENS = {"lc": "c", "li": "i", "le": "e"}


@dataclass
class LossSpec:
    """Which of the concatenation (c), individual (i) and ensemble (e) losses are summed."""

    use_c: bool = False
    use_i: bool = True
    use_e: bool = True
    weights: dict = field(default_factory=lambda: {"c": 1.0, "i": 1.0, "e": 1.0})

    def __post_init__(self):
        if not (self.use_c or self.use_i or self.use_e):
            raise ValueError("at least one loss must be enabled")

    @property
    def terms(self) -> list[str]:
        return [t for t, on in (("c", self.use_c), ("i", self.use_i), ("e", self.use_e)) if on]

    @classmethod
    def parse(cls, text: str) -> "LossSpec":
        """Parse ``"li+le"``-style tokens (``lc``, ``li``, ``le`` joined by ``+``)."""
        toks = [t.strip().lower() for t in text.split("+") if t.strip()]
        bad = [t for t in toks if t not in LOSS_TOKENS]
        if bad or not toks:
            raise ValueError(f"unknown loss token(s) {bad or text!r}; use lc, li, le joined by '+'")
        on = {LOSS_TOKENS[t] for t in toks}
        return cls(use_c="c" in on, use_i="i" in on, use_e="e" in on)

    def __str__(self):
        return "+".join("l" + t for t in self.terms)


@dataclass
class ClassifierParams:
    W: list[Tensor]
    b: list[Tensor]
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.W) != len(self.b):
            raise ValueError("one bias per classifier weight matrix")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def K(self) -> int:
        return len(self.W)

    @classmethod
    def init(cls, c: int, num_classes: int, K: int, dropout: float = 0.0, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        bound = 1.0 / np.sqrt(c)
        W = [Tensor(rng.uniform(-bound, bound, (num_classes, c)).astype(dtype), requires_grad=True) for _ in range(K)]
        b = [Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True) for _ in range(K)]
        return cls(W, b, dropout)

    def named_parameters(self):
        out = []
        for k, (W, b) in enumerate(zip(self.W, self.b)):
            out += [(f"head.W.{k}", W), (f"head.b.{k}", b)]
        return out


def glimpse_score(xhat, W, b, p: float = 0.0, training: bool = False, rng=None):
    """``s = W @ dropout(xhat) + b`` and ``yhat = softmax(s)``; dropout only in training."""
    xhat = as_tensor(xhat)
    x = dropout(xhat, p, training=training, rng=rng)
    c = x.shape[-1]
    s = (matmul(x.reshape(-1, c), transpose(as_tensor(W))) + b).reshape(x.shape[:-1] + (W.shape[0],))
    return s, softmax(s, axis=-1)


def _batch_mean(t: Tensor) -> Tensor:
    return t if t.ndim == 0 else t.mean()


def _target(y, like: Tensor) -> np.ndarray:
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if y.shape == like.shape:
        return y.astype(like.dtype)
    # integer labels
    out = np.zeros(like.shape, dtype=like.dtype)
    np.put_along_axis(out, y.astype(np.int64)[..., None], 1, axis=-1)
    return out


def concat_loss(scores: Sequence[Tensor], y) -> Tensor:
    """Cross entropy of softmax over the summed raw glimpse scores."""
    if not scores:
        raise ValueError("need at least one glimpse")
    total = scores[0]
    for s in scores[1:]:
        total = total + s
    yhat = softmax(total, axis=-1)
    return _batch_mean(cross_entropy(yhat, _target(y, yhat)))


def individual_loss(yhats: Sequence[Tensor], y) -> Tensor:
    """Sum over glimpses of each glimpse's own cross entropy."""
    if not yhats:
        raise ValueError("need at least one glimpse")
    target = _target(y, yhats[0])
    total = cross_entropy(yhats[0], target)
    for yh in yhats[1:]:
        total = total + cross_entropy(yh, target)
    return _batch_mean(total)


def ensemble_distribution(yhats: Sequence[Tensor]) -> Tensor:
    total = yhats[0]
    for yh in yhats[1:]:
        total = total + yh
    return total * (1.0 / len(yhats))


def ensemble_loss(yhats: Sequence[Tensor], y) -> Tensor:
    """Cross entropy of the average glimpse distribution (not the average score)."""
    if not yhats:
        raise ValueError("need at least one glimpse")
    ybar = ensemble_distribution(yhats)
    return _batch_mean(cross_entropy(ybar, _target(y, ybar)))


def total_loss(spec: LossSpec, states, y):
    """Weighted sum of the enabled losses; returns ``(loss, {term: value})``."""
    scores = [st.scores for st in states]
    yhats = [st.yhat for st in states]
    parts = {}
    if spec.use_c:
        parts["c"] = concat_loss(scores, y)
    if spec.use_i:
        parts["i"] = individual_loss(yhats, y)
    if spec.use_e:
        parts["e"] = ensemble_loss(yhats, y)
    loss = None
    for t, v in parts.items():
        term = v * float(spec.weights.get(t, 1.0))
        loss = term if loss is None else loss + term
    return loss, {t: float(v.data) for t, v in parts.items()}


def predict(states, mode: str = "ensemble"):
    """Final class distribution and argmax (lowest index wins ties).

    ``ensemble`` averages the glimpse distributions; ``concat`` takes the
    softmax of the summed raw scores.
    """
    if not states:
        raise ValueError("need at least one glimpse")
    if mode == "ensemble":
        dist = np.mean([np.asarray(st.yhat.data if isinstance(st.yhat, Tensor) else st.yhat) for st in states], axis=0)
    elif mode == "concat":
        total = np.sum([np.asarray(st.scores.data if isinstance(st.scores, Tensor) else st.scores) for st in states], axis=0)
        z = total - total.max(axis=-1, keepdims=True)
        e = np.exp(z)
        dist = e / e.sum(axis=-1, keepdims=True)
    else:
        raise ValueError(f"unknown prediction mode {mode!r}")
    return dist, np.argmax(dist, axis=-1)

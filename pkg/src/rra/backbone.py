"""Small convolutional feature extractor producing the ``c x (n*h*w)`` feature matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import BatchNormState, Tensor, activation, as_tensor, batchnorm, conv2d, transpose
from .rra_block import FeatureMapBatch


@dataclass
class BackboneConfig:
    # (out_channels, kernel, stride) per stage
    stages: list = field(default_factory=lambda: [(8, 3, 2), (16, 3, 2), (32, 3, 2)])
    in_channels: int = 3
    input_size: int = 32
    with_batchnorm: bool = False
    frozen: bool = False

    @property
    def channels(self) -> int:
        return self.stages[-1][0]

    def output_size(self, size: int | None = None) -> int:
        s = self.input_size if size is None else size
        for _, k, stride in self.stages:
            s = (s + 2 * (k // 2) - k) // stride + 1
        return s

    def validate(self):
        if not self.stages:
            raise ValueError("backbone needs at least one conv stage")
        if self.channels < 1:
            raise ValueError("final channel count must be >= 1")
        if self.output_size() < 1:
            raise ValueError(f"input size {self.input_size} collapses to nothing")


class Backbone:
    """Conv -> (BN) -> ReLU stages applied to every frame with shared weights."""

    def __init__(self, config: BackboneConfig, rng=None, dtype=np.float32):
        config.validate()
        self.config = config
        rng = np.random.default_rng(rng)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.bns: list[BatchNormState] = []
        cin = config.in_channels
        for out, k, _ in config.stages:
            std = np.sqrt(2.0 / (cin * k * k))
            self.weights.append(Tensor((rng.standard_normal((out, cin, k, k)) * std).astype(dtype), requires_grad=True))
            self.biases.append(Tensor(np.zeros(out, dtype=dtype), requires_grad=True))
            if config.with_batchnorm:
                self.bns.append(BatchNormState(out, dtype=dtype))
            cin = out
        self.frozen = config.frozen
        self.training = True

    def set_frozen(self, flag: bool):
        """Frozen parameters still pass gradients through but are not updated.

        Frozen batch-norm layers also stop updating running statistics.
        """
        self.frozen = bool(flag)
        self.config.frozen = self.frozen
        self._sync_bn()

    def train(self):
        self.training = True
        self._sync_bn()

    def eval(self):
        self.training = False
        self._sync_bn()

    def _sync_bn(self):
        for bn in self.bns:
            bn.mode = "train" if self.training and not self.frozen else "eval"

    def named_parameters(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"backbone.conv.{i}.weight", w), (f"backbone.conv.{i}.bias", b)]
        for i, bn in enumerate(self.bns):
            out += [(f"backbone.bn.{i}.gamma", bn.gamma), (f"backbone.bn.{i}.beta", bn.beta)]
        return out

    def named_batchnorms(self):
        return [(f"backbone.bn.{i}", bn) for i, bn in enumerate(self.bns)]

    def forward_images(self, images) -> Tensor:
        """``(N, C, H, W)`` images -> ``(N, c, h, w)`` post-ReLU features."""
        x = as_tensor(images)
        for i, ((_, k, stride), w, b) in enumerate(zip(self.config.stages, self.weights, self.biases)):
            x = conv2d(x, w, b, stride=stride, padding=k // 2)
            if self.bns:
                x = batchnorm(x, self.bns[i], axis=1)
            x = activation(x, "relu")
        return x

    def extract_features(self, frames) -> FeatureMapBatch:
        """``(B, n, C, H, W)`` or ``(n, C, H, W)`` frames -> feature matrix ``(B, c, n*h*w)``.

        Position ``p = (frame * h + row) * w + col``.
        """
        frames = as_tensor(frames)
        single = frames.ndim == 4
        if single:
            frames = frames.reshape((1,) + frames.shape)
        if frames.ndim != 5:
            raise ValueError(f"expected (B, n, C, H, W) frames, got shape {frames.shape}")
        B, n, C, H, W = frames.shape
        cfg = self.config
        if C != cfg.in_channels or H != cfg.input_size or W != cfg.input_size:
            raise ValueError(
                f"frames of shape {(C, H, W)} do not match backbone input "
                f"{(cfg.in_channels, cfg.input_size, cfg.input_size)}"
            )
        feats = self.forward_images(frames.reshape(B * n, C, H, W))
        c, h, w = feats.shape[1:]
        X = transpose(feats.reshape(B, n, c, h, w), (0, 2, 1, 3, 4)).reshape(B, c, n * h * w)
        if single:
            X = X.reshape(c, n * h * w)
        return FeatureMapBatch(X=X, Xbar=X, n=n, h=h, w=w)

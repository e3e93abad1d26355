"""Backbone + redundancy-reduction attention + per-glimpse classifiers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig
from .core import as_tensor
from .heads import ClassifierParams, glimpse_score
from .rra_block import VARIANTS, RRAParams, parallel_glimpses, run_glimpses


@dataclass
class ModelConfig:
    num_classes: int = 10
    K: int = 4
    variant: str = "full"
    parallel: bool = False
    dropout: float = 0.5
    dtype: str = "float32"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        self.backbone.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["stages"] = [list(s) for s in self.backbone.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = dict(d.pop("backbone"))
        bb["stages"] = [tuple(s) for s in bb["stages"]]
        return cls(backbone=BackboneConfig(**bb), **d)


class RRAModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        ss = np.random.SeedSequence(seed)
        r_bb, r_rra, r_head = (np.random.default_rng(s) for s in ss.spawn(3))
        self.backbone = Backbone(config.backbone, rng=r_bb, dtype=dtype)
        c = config.backbone.channels
        self.rra = RRAParams.init(c, config.K, rng=r_rra, dtype=dtype, reduction=not config.parallel)
        self.heads = ClassifierParams.init(c, config.num_classes, config.K, config.dropout, rng=r_head, dtype=dtype)
        self.training = True
        self.freeze_bn = False

    # ------------------------------------------------------------ bookkeeping
    def named_parameters(self):
        return self.backbone.named_parameters() + self.rra.named_parameters() + self.heads.named_parameters()

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_batchnorms(self):
        return self.backbone.named_batchnorms() + self.rra.named_batchnorms()

    def backbone_parameter_names(self) -> set[str]:
        return {n for n, _ in self.backbone.named_parameters()}

    def frozen_parameter_names(self) -> set[str]:
        return self.backbone_parameter_names() if self.backbone.frozen else set()

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(t.size for n, t in self.named_parameters() if n.startswith(prefix)))

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def train(self):
        self.training = True
        self.backbone.train()
        self._sync_bn()

    def eval(self):
        self.training = False
        self.backbone.eval()
        self._sync_bn()

    def set_freeze_bn(self, flag: bool):
        """Keep the attention block's BN layers on their running statistics during training."""
        self.freeze_bn = bool(flag)
        self._sync_bn()

    def _sync_bn(self):
        for bn in self.rra.bn:
            bn.mode = "train" if self.training and not self.freeze_bn else "eval"

    # --------------------------------------------------------------- forward
    def features(self, frames):
        return self.backbone.extract_features(frames)

    def glimpses(self, fmb):
        if self.config.parallel:
            return parallel_glimpses(fmb.X, self.rra, self.config.variant, fmb.n)
        states, _ = run_glimpses(fmb.X, self.rra, self.config.variant, fmb.n)
        return states

    def forward(self, frames, rng=None):
        """Frames ``(B, n, C, H, W)`` -> glimpse states with ``scores`` and ``yhat`` filled in."""
        fmb = self.features(as_tensor(frames))
        states = self.glimpses(fmb)
        rng = np.random.default_rng(rng) if self.training and self.heads.dropout > 0 else None
        for st in states:
            st.scores, st.yhat = glimpse_score(
                st.xhat, self.heads.W[st.k], self.heads.b[st.k], self.heads.dropout, self.training, rng
            )
        return states

    __call__ = forward

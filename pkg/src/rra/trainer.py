"""Adam optimization with step decay, backbone freezing, checkpoints and evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig
from .core import NonFiniteError, Tensor, no_grad, softmax
from .data import Dataset, SamplingSpec, VideoSample, _video_rng, test_clips, train_clip
from .heads import LossSpec, predict, total_loss
from .io import CKPT_VERSION, config_hash, load_checkpoint, save_checkpoint
from .model import ModelConfig, RRAModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The loss or an intermediate value became NaN/Inf."""


# ------------------------------------------------------------------ config
def _parse_stages(text: str) -> list[tuple[int, int, int]]:
    return [tuple(int(x) for x in part.split(":")) for part in text.split(",") if part.strip()]


def _format_stages(stages) -> str:
    return ",".join(":".join(str(x) for x in s) for s in stages)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    lr_decay: float = 0.1
    decay_every_epochs: int = 30
    total_epochs: int = 120
    batch_size: int = 16
    freeze_backbone_until_epoch: int = 0
    seed: int = 0
    loss: str = "li+le"
    K: int = 4
    variant: str = "full"
    parallel: bool = False
    dropout: float = 0.7
    n_segments: int = 4
    multiscale: bool = True
    input_size: int = 32
    stages: str = "8:3:2,16:3:2,32:3:2"
    backbone_bn: bool = False
    freeze_bn: bool = False
    dtype: str = "float32"
    eval_segments: int = 25
    eval_crops: int = 5
    eval_flip: bool = True
    eval_scale: float = 0.875
    eval_every: int = 1
    predict_mode: str = "ensemble"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be >= 0")
        if self.predict_mode not in ("ensemble", "concat"):
            raise ValueError("predict_mode must be ensemble or concat")
        self.loss_spec  # parses
        _parse_stages(self.stages)

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec.parse(self.loss)

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            num_classes=num_classes, K=self.K, variant=self.variant, parallel=self.parallel,
            dropout=self.dropout, dtype=self.dtype,
            backbone=BackboneConfig(stages=_parse_stages(self.stages), input_size=self.input_size,
                                    with_batchnorm=self.backbone_bn),
        )

    def train_sampling(self) -> SamplingSpec:
        return SamplingSpec(self.n_segments, "train", self.seed, input_size=self.input_size,
                            multiscale=self.multiscale)

    def eval_protocol(self) -> SamplingSpec:
        return SamplingSpec(self.eval_segments, "test", self.seed, test_crops=self.eval_crops,
                            flip=self.eval_flip, input_size=self.input_size, test_scale=self.eval_scale)

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def to_mapping(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string (or typed) values; unknown keys raise ``KeyError``."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in types:
                raise KeyError(f"unknown config key {k!r}")
            kw[k] = _coerce(v, types[k])
        return cls(**kw)


def _coerce(v, typ: str):
    if not isinstance(v, str):
        return v
    if typ == "bool":
        low = v.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    if typ == "int":
        return int(v)
    if typ == "float":
        return float(v)
    return v


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step decay: ``lr * lr_decay ** floor(epoch / decay_every_epochs)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.lr_decay ** (epoch // config.decay_every_epochs)


# ------------------------------------------------------------------ optimizer
def adam_update(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step on arrays; returns ``(param, m, v)``."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam with per-parameter step counters, so parameters unfrozen later get a fresh bias correction."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, Tensor], lr: float, frozen: Sequence[str] = ()):
        frozen = set(frozen)
        for name, p in params.items():
            if name in frozen:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            t = self.t.get(name, 0) + 1
            new, m, v = adam_update(p.data, g, m, v, t, lr, self.beta1, self.beta2, self.eps)
            p.data[...] = new
            self.m[name], self.v[name], self.t[name] = m.astype(p.dtype), v.astype(p.dtype), t

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        tensors = {}
        for name in self.m:
            tensors[f"adam.m.{name}"] = self.m[name]
            tensors[f"adam.v.{name}"] = self.v[name]
        return tensors, {"t": dict(self.t), "betas": [self.beta1, self.beta2], "eps": self.eps}

    def load_state(self, tensors: dict[str, np.ndarray], meta: dict):
        self.t = {k: int(v) for k, v in meta["t"].items()}
        self.beta1, self.beta2 = meta["betas"]
        self.eps = meta["eps"]
        self.m = {n: tensors[f"adam.m.{n}"].copy() for n in self.t}
        self.v = {n: tensors[f"adam.v.{n}"].copy() for n in self.t}


# ------------------------------------------------------------------ checkpoints
def model_tensors(model: RRAModel) -> dict[str, np.ndarray]:
    out = {name: t.data for name, t in model.named_parameters()}
    for name, bn in model.named_batchnorms():
        out[f"{name}.running_mean"] = bn.running_mean
        out[f"{name}.running_var"] = bn.running_var
    return out


def load_model_tensors(model: RRAModel, tensors: dict[str, np.ndarray]):
    for name, t in model.named_parameters():
        if name not in tensors:
            raise KeyError(f"checkpoint lacks parameter {name}")
        if tensors[name].shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {tensors[name].shape} vs {t.shape}")
        t.data = tensors[name].astype(t.dtype, copy=True)
    for name, bn in model.named_batchnorms():
        bn.running_mean = tensors[f"{name}.running_mean"].astype(bn.running_mean.dtype, copy=True)
        bn.running_var = tensors[f"{name}.running_var"].astype(bn.running_var.dtype, copy=True)


def save_training_checkpoint(path, model: RRAModel, config: TrainConfig, epoch: int,
                             optimizer: Adam | None = None, history: list | None = None):
    tensors = model_tensors(model)
    meta = {
        "format_version": CKPT_VERSION,
        "epoch": epoch,
        "train_config": config.to_mapping(),
        "model_config": model.config.to_dict(),
        "config_hash": config_hash(config.to_mapping()),
        "history": history or [],
    }
    if optimizer is not None:
        opt_tensors, opt_meta = optimizer.state()
        tensors.update(opt_tensors)
        meta["optimizer"] = opt_meta
    save_checkpoint(path, tensors, meta)


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(model, metadata, tensors)``."""
    tensors, meta = load_checkpoint(path)
    model = RRAModel(ModelConfig.from_dict(meta["model_config"]), seed=0)
    load_model_tensors(model, tensors)
    return model, meta, tensors


# ------------------------------------------------------------------ evaluation
@dataclass
class EvalResult:
    top1: float
    per_class: list[float]
    mean_per_class: float
    inputs_per_video: int
    per_glimpse_top1: list[float] = field(default_factory=list)
    predictions: list[int] = field(default_factory=list)

    def as_dict(self):
        return asdict(self)


def score_clips(model: RRAModel, clips: np.ndarray, mode: str = "ensemble"):
    """Score ``(B, V, n, C, S, S)`` crop variants of ``B`` videos.

    Raw glimpse scores are averaged over the ``V`` variants before the
    softmax. Returns ``(distribution (B, C), per-glimpse argmax (B, K))``.
    """
    B, V = clips.shape[:2]
    with no_grad():
        states = model(clips.reshape((B * V,) + clips.shape[2:]))
        for st in states:
            st.scores = Tensor(st.scores.data.reshape(B, V, -1).mean(axis=1))
            st.yhat = softmax(st.scores, axis=-1)
    dist, _ = predict(states, mode)
    glimpse = np.stack([np.argmax(st.scores.data, axis=-1) for st in states], axis=1)
    return dist, glimpse


class TemplateScorer:
    """Wraps the brute-force template matcher so it can be evaluated like a model."""

    def __init__(self, templates: np.ndarray, num_classes: int):
        from .data import template_match_predict

        self._match = template_match_predict
        self.templates = templates
        self.num_classes = num_classes

    def score_clips(self, clips: np.ndarray, mode: str = "ensemble"):
        dist = np.zeros((len(clips), self.num_classes))
        for i, variants in enumerate(clips):
            frames = variants.reshape((-1,) + variants.shape[2:])
            dist[i, self._match(frames, self.templates)] = 1.0
        return dist, np.argmax(dist, axis=1)[:, None]


def evaluate(model, videos: Sequence[VideoSample], protocol: SamplingSpec, num_classes: int,
             mode: str = "ensemble", chunk: int = 8) -> EvalResult:
    """Top-1, per-class and mean per-class accuracy under a segment/crop/flip protocol."""
    if not videos:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    preds, glimpse_preds, inputs = [], [], 0
    try:
        for i in range(0, len(videos), chunk):
            batch = videos[i:i + chunk]
            clips = np.stack([test_clips(v, protocol) for v in batch])
            inputs = clips.shape[1] * clips.shape[2]
            if isinstance(model, RRAModel):
                dist, gp = score_clips(model, clips, mode)
            else:
                dist, gp = model.score_clips(clips, mode)
            preds.extend(np.argmax(dist, axis=1).tolist())
            glimpse_preds.append(gp)
    finally:
        if was_training:
            model.train()
    labels = np.array([v.label for v in videos])
    preds_arr = np.array(preds)
    gp = np.concatenate(glimpse_preds)
    per_class = []
    for c in range(num_classes):
        sel = labels == c
        per_class.append(float((preds_arr[sel] == c).mean()) if sel.any() else float("nan"))
    present = [p for p in per_class if not np.isnan(p)]
    return EvalResult(
        top1=float((preds_arr == labels).mean()),
        per_class=per_class,
        mean_per_class=float(np.mean(present)),
        inputs_per_video=inputs,
        per_glimpse_top1=[float((gp[:, k] == labels).mean()) for k in range(gp.shape[1])],
        predictions=preds,
    )


# ------------------------------------------------------------------ training
@dataclass
class TrainResult:
    model: RRAModel
    history: list[dict]
    optimizer: Adam
    final_eval: EvalResult | None = None
    initial_eval: EvalResult | None = None


def _metric_columns(spec: LossSpec) -> list[str]:
    return ["epoch", "lr", "train_loss"] + [f"train_loss_{t}" for t in spec.terms] + ["eval_top1", "eval_mean_class"]


def write_metrics_csv(path, history: list[dict], spec: LossSpec):
    cols = _metric_columns(spec)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: _fmt_metric(row.get(k, "")) for k in cols})


def _fmt_metric(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def train(config: TrainConfig, dataset: Dataset, out_dir=None, resume=None,
          stop_after_epoch: int | None = None, initial_eval: bool = False) -> TrainResult:
    """Train an RRA model on ``dataset.train``; evaluate on ``dataset.test`` each ``eval_every`` epochs.

    Every random draw is keyed by ``(seed, epoch, video id or batch)``, so a
    run resumed from a checkpoint continues bit-identically.
    """
    spec = config.loss_spec
    if not dataset.train:
        raise ValueError("empty training set")
    model = RRAModel(config.model_config(dataset.num_classes), seed=config.seed)
    model.set_freeze_bn(config.freeze_bn)
    opt = Adam()
    history: list[dict] = []
    start = 0
    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        if meta.get("config_hash") != config_hash(config.to_mapping()):
            log.warning("resuming with a config that differs from the checkpoint's")
        load_model_tensors(model, tensors)
        if "optimizer" in meta:
            opt.load_state(tensors, meta["optimizer"])
        history = list(meta.get("history", []))
        start = int(meta["epoch"])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    sampling = config.train_sampling()
    protocol = config.eval_protocol()
    params = dict(model.named_parameters())
    last = config.total_epochs if stop_after_epoch is None else min(stop_after_epoch, config.total_epochs)
    final_eval = first_eval = None
    if initial_eval and dataset.test:
        first_eval = evaluate(model, dataset.test, protocol, dataset.num_classes, config.predict_mode)

    for epoch in range(start, last):
        model.backbone.set_frozen(epoch < config.freeze_backbone_until_epoch)
        model.train()
        lr = lr_at(epoch, config)
        order = _video_rng(config.seed, "order", epoch).permutation(len(dataset.train))
        sums = {t: 0.0 for t in spec.terms}
        total, seen = 0.0, 0
        for bi, start_i in enumerate(range(0, len(order), config.batch_size)):
            batch = [dataset.train[j] for j in order[start_i:start_i + config.batch_size]]
            frames = np.stack([train_clip(v, sampling, epoch) for v in batch]).astype(config.dtype)
            labels = np.array([v.label for v in batch])
            model.zero_grad()
            try:
                states = model(frames, rng=_video_rng(config.seed, "dropout", epoch, bi))
                loss, parts = total_loss(spec, states, labels)
                if not np.isfinite(loss.data):
                    raise NonFiniteError("loss")
                loss.backward()
            except NonFiniteError as e:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch {bi}: {e}") from e
            opt.step(params, lr, model.frozen_parameter_names())
            total += float(loss.data) * len(batch)
            for t, v in parts.items():
                sums[t] += v * len(batch)
            seen += len(batch)

        row = {"epoch": epoch + 1, "lr": lr, "train_loss": total / seen}
        row.update({f"train_loss_{t}": s / seen for t, s in sums.items()})
        if dataset.test and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.total_epochs):
            final_eval = evaluate(model, dataset.test, protocol, dataset.num_classes, config.predict_mode)
            row["eval_top1"] = final_eval.top1
            row["eval_mean_class"] = final_eval.mean_per_class
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f top1 %s", epoch + 1, lr, row["train_loss"], row.get("eval_top1"))
        if out is not None:
            save_training_checkpoint(out / "model.ckpt", model, config, epoch + 1, opt, history)
            write_metrics_csv(out / "metrics.csv", history, spec)

    return TrainResult(model, history, opt, final_eval, first_eval)

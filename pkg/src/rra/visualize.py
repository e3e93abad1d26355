"""Pixel-level heatmaps of what drives each glimpse's attention and suppression.

Glimpse indices are 1-based here, matching the ``g{k}`` part of file names.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image
from scipy import ndimage

from .core import Tensor, as_tensor, mul, sum as tsum
from .rra_block import ablated_update, summarize, variant_attention

TARGETS = ("attention_influence", "suppression")


@dataclass
class HeatmapRequest:
    target: str = "attention_influence"
    k: int = 1
    top_m: int = 4
    gaussian_sigma: float = 2.0
    colormap: str = "jet"
    overlay_alpha: float = 0.5

    def validate(self, channels: int | None = None):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        if not 0 <= self.overlay_alpha <= 1:
            raise ValueError("overlay_alpha must lie in [0, 1]")
        if self.colormap not in colormaps:
            raise ValueError(f"unknown colormap {self.colormap!r}")
        if self.top_m < 1 or (channels is not None and self.top_m > channels):
            raise ValueError("top_m must lie in [1, channels]")


def attention_energy(a) -> float:
    """Half the squared norm of an attention distribution; ``1/(2m)`` when uniform."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    return 0.5 * float(np.sum(a * a))


# ------------------------------------------------------------------ tracing
def _trace(model, frames: Tensor, upto: int):
    """Run glimpses ``1..upto`` on one video, keeping every intermediate map."""
    fmb = model.features(frames)
    X = Xbar = fmb.X
    params, variant = model.rra, model.config.variant
    trace = []
    for k in range(upto):
        a = variant_attention(Xbar, params.W_a[k], variant, fmb.n)
        step = {"X": X, "Xbar": Xbar, "a": a}
        if k < params.K - 1 and not model.config.parallel:
            xhat = summarize(Xbar, a)
            Xbar, X, step["xtilde"] = ablated_update(X, xhat, params.fc_W[k], params.fc_b[k], params.bn[k], variant)
            step["Xbar_next"] = Xbar
        trace.append(step)
    return trace


def _check_frames(frames) -> np.ndarray:
    frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
    if frames.ndim != 4:
        raise ValueError("expected one video's frames shaped (n, C, H, W)")
    return frames


def _pixel_map(grad: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite input gradient")
    return np.abs(grad).sum(axis=1)


def influence_gradient(model, frames, k: int = 1, weights=None) -> np.ndarray:
    """Gradient of ``sum_i w_i a_i^k`` w.r.t. input pixels, shape ``(n, C, H, W)``.

    ``w`` is held constant; it defaults to ``a^k`` itself, which makes this
    the gradient of the attention energy.
    """
    frames = _check_frames(frames)
    if not 1 <= k <= model.config.K:
        raise ValueError(f"glimpse k must lie in [1, {model.config.K}]")
    model.eval()
    x = Tensor(frames, requires_grad=True)
    a = _trace(model, x, k)[k - 1]["a"]
    w = a.data if weights is None else np.asarray(weights, dtype=a.dtype).reshape(a.shape)
    tsum(mul(a, Tensor(w))).backward()
    return x.grad if x.grad is not None else np.zeros_like(frames)


def influence_map(model, frames, k: int = 1, weights=None) -> np.ndarray:
    """Per-pixel l1 norm over color channels of :func:`influence_gradient`; ``(n, H, W)``."""
    return _pixel_map(influence_gradient(model, frames, k, weights))


def suppressed_channels(xtilde: np.ndarray, top_m: int) -> np.ndarray:
    """Indices of the ``top_m`` smallest entries, most suppressed first."""
    xtilde = np.asarray(xtilde).reshape(-1)
    if not 1 <= top_m <= xtilde.size:
        raise ValueError("top_m must lie in [1, channels]")
    return np.argsort(xtilde, kind="stable")[:top_m]


def suppression_map(model, frames, k: int = 1, top_m: int = 4, return_channels: bool = False):
    """Pixels driving the activations that glimpse ``k`` suppressed.

    Picks the ``top_m`` most negative channels of ``xtilde^k``; within them
    every entry that dropped from ``X^k`` to ``Xbar^{k+1}`` contributes its
    input gradient, weighted by the size of the drop.
    """
    frames = _check_frames(frames)
    if model.config.parallel:
        raise ValueError("parallel-glimpse models do not suppress")
    if not 1 <= k < model.config.K:
        raise ValueError(f"suppression needs 1 <= k < K = {model.config.K}")
    model.eval()
    x = Tensor(frames, requires_grad=True)
    step = _trace(model, x, k)[k - 1]
    X, Xn = step["X"], step["Xbar_next"]
    chans = suppressed_channels(step["xtilde"].data, top_m)
    w = np.zeros(X.shape, dtype=X.dtype)
    drop = X.data[..., chans, :] - Xn.data[..., chans, :]
    w[..., chans, :] = np.where(drop > 0, drop, 0.0)
    if np.any(w):
        tsum(mul(X, Tensor(w))).backward()
    grad = x.grad if x.grad is not None else np.zeros_like(frames)
    out = _pixel_map(grad)
    return (out, chans) if return_channels else out


# ------------------------------------------------------------------ rendering
def smooth(heat: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur truncated at three sigma; ``sigma == 0`` is the identity."""
    heat = np.asarray(heat, dtype=np.float64)
    if sigma == 0:
        return heat.copy()
    return ndimage.gaussian_filter(heat, sigma=sigma, truncate=3.0, mode="reflect")


def normalize(heat: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(heat.min()), float(heat.max())
    if hi - lo <= 0:
        return np.zeros_like(heat, dtype=np.float64)
    return (heat - lo) / (hi - lo)


def render(heat: np.ndarray, request: HeatmapRequest, base_frame=None, path=None) -> np.ndarray:
    """Blur, normalize and colorize an ``(H, W)`` map; optionally blend over ``(C, H, W)`` and save PNG.

    Returns the ``(H, W, 3)`` uint8 image.
    """
    heat = np.asarray(heat)
    if heat.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    if np.any(heat < 0):
        raise ValueError("heatmap must be nonnegative")
    request.validate()
    rgb = colormaps[request.colormap](normalize(smooth(heat, request.gaussian_sigma)))[..., :3]
    if base_frame is not None:
        base = np.asarray(base_frame, dtype=np.float64)
        if base.shape[-2:] != heat.shape:
            raise ValueError("base frame and heatmap sizes differ")
        base = np.clip(np.moveaxis(base, 0, -1), 0, 1)
        if base.shape[-1] == 1:
            base = np.repeat(base, 3, axis=-1)
        rgb = request.overlay_alpha * rgb + (1 - request.overlay_alpha) * base[..., :3]
    img = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    if path is not None:
        Image.fromarray(img).save(path, format="PNG")
    return img


def heatmap_filename(video_id: str, k: int, target: str) -> str:
    return f"{video_id}_g{k}_{target}.png"


def render_video(model, frames, video_id: str, out_dir, request: HeatmapRequest | None = None,
                 suppression: tuple[int, int] | None = None) -> list[Path]:
    """Influence maps for every frame and glimpse, plus suppression maps if ``(k, top_m)`` is given.

    Writes ``{video_id}_g{k}_influence_f{i}.png`` and
    ``{video_id}_g{k}_suppression_f{i}.png``; returns the paths in order.
    """
    request = request or HeatmapRequest()
    frames = _check_frames(frames)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(1, model.config.K + 1):
        maps = influence_map(model, frames, k)
        for i, m in enumerate(maps):
            p = out / heatmap_filename(video_id, k, f"influence_f{i}")
            render(m, request, frames[i], p)
            paths.append(p)
    if suppression is not None:
        k, top_m = suppression
        maps = suppression_map(model, frames, k, top_m)
        for i, m in enumerate(maps):
            p = out / heatmap_filename(video_id, k, f"suppression_f{i}")
            render(m, request, frames[i], p)
            paths.append(p)
    return paths

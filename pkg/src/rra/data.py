"""Segment sampling, crop/flip augmentation, and a planted-pattern video generator.

Videos are arrays of frames shaped ``(T, C, H, W)``. A video is cut into
``n`` contiguous segments; training draws one random frame per segment,
testing takes the middle frame of each.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

TRAIN_SCALES = (1.0, 0.875, 0.75, 0.66)
CROP_POSITIONS = ("top_left", "top_right", "bottom_left", "bottom_right", "center")


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, C, H, W)
    label: int
    id: str

    def __post_init__(self):
        if self.frames.ndim != 4 or len(self.frames) < 1:
            raise ValueError(f"video {self.id!r} needs frames shaped (T>=1, C, H, W)")

    @property
    def frame_count(self) -> int:
        return len(self.frames)


@dataclass
class SamplingSpec:
    n_segments: int = 4
    mode: str = "train"
    seed: int = 0
    test_crops: int = 1
    flip: bool = False
    input_size: int = 32
    test_scale: float = 1.0  # crop side / short side at test time
    multiscale: bool = True

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.test_crops not in (1, 5):
            raise ValueError("test_crops must be 1 or 5")
        if self.mode not in ("train", "test"):
            raise ValueError("mode must be 'train' or 'test'")

    @property
    def variants_per_frame(self) -> int:
        return self.test_crops * (2 if self.flip else 1)


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    frames_per_video: int = 16
    height: int = 32
    width: int = 32
    channels: int = 3
    discriminative_frame_fraction: float = 0.25
    pattern_size: int = 8
    distractor_count: int = 3
    noise_sigma: float = 0.2
    train_per_class: int = 40
    test_per_class: int = 20
    seed: int = 0
    margin: int = 0  # border kept free of stamps

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 < self.discriminative_frame_fraction <= 1:
            raise ValueError("discriminative_frame_fraction must lie in (0, 1]")
        if self.frames_per_video < 1:
            raise ValueError("frames_per_video must be >= 1")
        free = min(self.height, self.width) - 2 * self.margin
        if self.pattern_size < 1 or self.pattern_size > free:
            raise ValueError("pattern does not fit inside the frame")
        slots = (free // self.pattern_size) ** 2
        if self.distractor_count + 1 > slots:
            raise ValueError("too many distractors for the frame size")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Dataset:
    train: list[VideoSample]
    test: list[VideoSample]
    num_classes: int
    templates: np.ndarray | None = None  # (num_classes, C, s, s)
    spec: SyntheticSpec | None = field(default=None, repr=False)


# ------------------------------------------------------------------ segments
def slice_segments(frame_count: int, n: int) -> list[tuple[int, int]]:
    """Cut ``frame_count`` frames into ``n`` contiguous ``[start, end)`` ranges.

    Sizes differ by at most one, the extra frames going to the earliest
    segments. With fewer frames than segments, segment ``i`` is the single
    frame ``floor(i * frame_count / n)``, so frames repeat.
    """
    if frame_count < 1 or n < 1:
        raise ValueError("frame_count and n must be >= 1")
    if frame_count < n:
        return [(i * frame_count // n, i * frame_count // n + 1) for i in range(n)]
    base, extra = divmod(frame_count, n)
    out, start = [], 0
    for i in range(n):
        end = start + base + (1 if i < extra else 0)
        out.append((start, end))
        start = end
    return out


def _video_rng(*keys) -> np.random.Generator:
    ints = [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(ints))


def sample_train_frames(v: VideoSample, spec: SamplingSpec, epoch: int = 0) -> list[int]:
    """One uniformly drawn index per segment, seeded by ``(spec.seed, v.id, epoch)``."""
    rng = _video_rng(spec.seed, v.id, epoch, "frames")
    return [int(rng.integers(s, e)) for s, e in slice_segments(v.frame_count, spec.n_segments)]


def sample_test_frames(v: VideoSample, spec: SamplingSpec) -> list[int]:
    """Middle frame ``start + (end - start) // 2`` of every segment."""
    return [s + (e - s) // 2 for s, e in slice_segments(v.frame_count, spec.n_segments)]


# ------------------------------------------------------------------ cropping
def flip(frames: np.ndarray) -> np.ndarray:
    """Horizontal flip of ``(..., H, W)`` frames."""
    return frames[..., ::-1].copy()


def crop_box(height: int, width: int, size: int, position: str) -> tuple[int, int, int, int]:
    """``(top, left, size, size)`` of a square crop at a corner or the center."""
    if size > height or size > width:
        raise ValueError(f"crop {size} larger than frame {height}x{width}")
    top = {"top_left": 0, "top_right": 0, "bottom_left": height - size, "bottom_right": height - size,
           "center": (height - size) // 2}[position]
    left = {"top_left": 0, "top_right": width - size, "bottom_left": 0, "bottom_right": width - size,
            "center": (width - size) // 2}[position]
    return top, left, size, size


def resize(frames: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of the last two (square) axes to ``size x size``."""
    h, w = frames.shape[-2:]
    if h == size and w == size:
        return frames
    zoom = (1,) * (frames.ndim - 2) + (size / h, size / w)
    return ndimage.zoom(frames, zoom, order=1, mode="nearest", grid_mode=True).astype(frames.dtype)


def _crop(frames, box):
    top, left, h, w = box
    return frames[..., top:top + h, left:left + w]


def train_crop_params(height: int, width: int, rng: np.random.Generator, multiscale: bool = True):
    """Random scale, crop position and flip decision for one training clip."""
    short = min(height, width)
    scale = TRAIN_SCALES[rng.integers(len(TRAIN_SCALES))] if multiscale else 1.0
    size = max(1, int(round(short * scale)))
    position = CROP_POSITIONS[rng.integers(len(CROP_POSITIONS))]
    do_flip = bool(rng.random() < 0.5)
    return crop_box(height, width, size, position), do_flip


def test_crop_boxes(height: int, width: int, spec: SamplingSpec):
    size = max(1, int(round(min(height, width) * spec.test_scale)))
    positions = CROP_POSITIONS if spec.test_crops == 5 else ("center",)
    return [crop_box(height, width, size, p) for p in positions]


def augment(frames: np.ndarray, spec: SamplingSpec, seed=None):
    """Crop/flip ``(..., C, H, W)`` frames and resize to ``spec.input_size``.

    Train mode applies one random multi-scale corner-or-center crop and a
    50 % flip to all given frames and returns an array. Test mode returns the
    deterministic list of variants: each crop, then each crop flipped.
    """
    H, W = frames.shape[-2:]
    if spec.mode == "train":
        smallest = min(TRAIN_SCALES) if spec.multiscale else 1.0
    else:
        smallest = spec.test_scale
    if round(min(H, W) * smallest) < 1:
        raise ValueError(f"frame {H}x{W} is smaller than the minimum crop")
    if spec.mode == "train":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        box, do_flip = train_crop_params(H, W, rng, spec.multiscale)
        out = resize(_crop(frames, box), spec.input_size)
        return flip(out) if do_flip else np.ascontiguousarray(out)
    crops = [resize(_crop(frames, b), spec.input_size) for b in test_crop_boxes(H, W, spec)]
    variants = [np.ascontiguousarray(c) for c in crops]
    if spec.flip:
        variants += [flip(c) for c in crops]
    return variants


def train_clip(v: VideoSample, spec: SamplingSpec, epoch: int) -> np.ndarray:
    """Sampled and augmented training frames ``(n, C, S, S)`` for one video and epoch."""
    idx = sample_train_frames(v, spec, epoch)
    return augment(v.frames[idx], spec, _video_rng(spec.seed, v.id, epoch, "augment"))


def test_clips(v: VideoSample, spec: SamplingSpec) -> np.ndarray:
    """All test-time variants ``(V, n, C, S, S)``; ``V * n`` inputs per video."""
    idx = sample_test_frames(v, spec)
    return np.stack(augment(v.frames[idx], spec))


# ------------------------------------------------------------------ synthetic
def _slots(spec: SyntheticSpec):
    s, m = spec.pattern_size, spec.margin
    rows = (spec.height - 2 * m) // s
    cols = (spec.width - 2 * m) // s
    return [(m + r * s, m + c * s) for r in range(rows) for c in range(cols)]


def make_templates(spec: SyntheticSpec):
    """Class patterns and the class-independent distractor bank."""
    rng = _video_rng(spec.seed, "templates")
    shape = (spec.channels, spec.pattern_size, spec.pattern_size)
    classes = rng.uniform(0.2, 1.0, size=(spec.num_classes,) + shape).astype(np.float32)
    distractors = rng.uniform(0.2, 1.0, size=(max(4, spec.distractor_count * 2),) + shape).astype(np.float32)
    return classes, distractors


def _render_video(spec: SyntheticSpec, label: int, classes, distractors, rng) -> np.ndarray:
    T, s = spec.frames_per_video, spec.pattern_size
    frames = np.zeros((T, spec.channels, spec.height, spec.width), dtype=np.float32)
    slots = _slots(spec)
    n_disc = math.ceil(spec.discriminative_frame_fraction * T)
    disc = set(rng.choice(T, size=n_disc, replace=False).tolist())
    for t in range(T):
        picks = rng.choice(len(slots), size=spec.distractor_count + 1, replace=False)
        if t in disc:
            r, c = slots[picks[0]]
            frames[t, :, r:r + s, c:c + s] = classes[label]
        for j in picks[1:]:
            r, c = slots[j]
            frames[t, :, r:r + s, c:c + s] = distractors[rng.integers(len(distractors))]
    if spec.noise_sigma > 0:
        frames += rng.normal(0, spec.noise_sigma, size=frames.shape).astype(np.float32)
    return frames


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Balanced train/test videos whose class pattern appears in only some frames.

    ``ceil(fraction * frames_per_video)`` random frames of each video carry
    its class pattern at a random grid slot; every frame carries
    ``distractor_count`` class-independent patterns on other slots, plus
    Gaussian noise.
    """
    spec.validate()
    classes, distractors = make_templates(spec)
    splits = {}
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        rng = _video_rng(spec.seed, split)
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        labels = labels[rng.permutation(len(labels))]
        splits[split] = [
            VideoSample(_render_video(spec, int(lab), classes, distractors, rng), int(lab), f"{split}-{i:05d}")
            for i, lab in enumerate(labels)
        ]
    return Dataset(splits["train"], splits["test"], spec.num_classes, classes, spec)


def template_match_predict(frames: np.ndarray, templates: np.ndarray) -> int:
    """Brute-force oracle: class whose template has the smallest SSD anywhere in any frame."""
    s = templates.shape[-1]
    win = np.lib.stride_tricks.sliding_window_view(frames, (s, s), axis=(2, 3))  # (T, C, h', w', s, s)
    best = []
    for tpl in templates:
        ssd = ((win - tpl[None, :, None, None]) ** 2).sum(axis=(1, 4, 5))
        best.append(ssd.min())
    return int(np.argmin(best))

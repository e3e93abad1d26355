"""On-disk formats: raw tensor files, dataset directories, checkpoints, key=value configs.

Raw tensor file (``.rrt``), all little-endian::

    b"RRT1"  uint8 dtype code  uint8 ndim  uint32[ndim] shape  values

dtype codes: 1 = float32, 2 = float64, 3 = int64.

Checkpoint (``.ckpt``), all little-endian::

    b"RRACKPT\\0"  uint32 version  uint32 metadata_len  metadata (UTF-8 JSON)
    uint32 tensor_count
    tensor_count x { uint16 name_len  name (UTF-8)  tensor record as above }
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .data import Dataset, SyntheticSpec, VideoSample

TENSOR_MAGIC = b"RRT1"
CKPT_MAGIC = b"RRACKPT\0"
CKPT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


class CheckpointError(Exception):
    """Checkpoint file is unreadable or corrupted."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


# ------------------------------------------------------------------ tensors
def _write_tensor(f, arr: np.ndarray):
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<BB", code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise EOFError("truncated tensor data")
    return b


def _read_tensor(f) -> np.ndarray:
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise ValueError("bad tensor magic")
    code, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt)
    return data.reshape(shape).astype(dt.newbyteorder("="))


def write_tensor(path, arr: np.ndarray):
    with open(path, "wb") as f:
        _write_tensor(f, arr)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return _read_tensor(f)


# ------------------------------------------------------------------ configs
def format_config(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Values stay strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ValueError(f"line {lineno}: empty key")
        out[k] = v
    return out


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text())


# ------------------------------------------------------------------ datasets
MANIFEST = "manifest.txt"
DATASET_CFG = "dataset.cfg"


def save_dataset(ds: Dataset, out_dir):
    """Write ``manifest.txt`` (``id label frame_count`` per line), ``dataset.cfg`` and ``videos/*.rrt``."""
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    lines = []
    for v in ds.train + ds.test:
        write_tensor(out / "videos" / f"{v.id}.rrt", v.frames)
        lines.append(f"{v.id} {v.label} {v.frame_count}\n")
    (out / MANIFEST).write_text("".join(lines))
    meta = {"num_classes": ds.num_classes}
    if ds.spec is not None:
        meta.update(vars(ds.spec))
    (out / DATASET_CFG).write_text(format_config(meta))
    if ds.templates is not None:
        write_tensor(out / "templates.rrt", ds.templates)


def read_manifest(path) -> list[tuple[str, int, int]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            vid, label, count = line.split()
            rows.append((vid, int(label), int(count)))
    return rows


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not (d / MANIFEST).exists():
        raise FileNotFoundError(f"no {MANIFEST} in {d}")
    meta = read_config(d / DATASET_CFG) if (d / DATASET_CFG).exists() else {}
    train, test = [], []
    for vid, label, count in read_manifest(d / MANIFEST):
        frames = read_tensor(d / "videos" / f"{vid}.rrt")
        if len(frames) != count:
            raise ValueError(f"{vid}: manifest says {count} frames, file has {len(frames)}")
        (test if vid.startswith("test") else train).append(VideoSample(frames, label, vid))
    labels = [v.label for v in train + test]
    num_classes = int(meta.get("num_classes", max(labels) + 1))
    spec = None
    if "frames_per_video" in meta:
        kwargs = {}
        for name, fld in SyntheticSpec.__dataclass_fields__.items():
            if name in meta:
                kwargs[name] = float(meta[name]) if fld.type == "float" else _coerce(meta[name])
        spec = SyntheticSpec(**kwargs)
    templates = read_tensor(d / "templates.rrt") if (d / "templates.rrt").exists() else None
    return Dataset(train, test, num_classes, templates, spec)


def _coerce(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return {"true": True, "false": False}.get(v.lower(), v)


# ------------------------------------------------------------------ checkpoints
def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict):
    """Write named tensors and JSON metadata; tensors are stored in the given order."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    meta = json.dumps(metadata, sort_keys=True).encode()
    buf.write(struct.pack("<II", CKPT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        _write_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    f = io.BytesIO(raw)
    if f.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack("<II", _read_exact(f, 8))
        if version != CKPT_VERSION:
            raise CheckpointVersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
        metadata = json.loads(_read_exact(f, meta_len).decode())
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode()
            tensors[name] = _read_tensor(f)
        if f.read(1):
            raise ValueError("trailing bytes")
    except CheckpointError:
        raise
    except (EOFError, ValueError, struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupted checkpoint {path}: {e}") from e
    return tensors, metadata

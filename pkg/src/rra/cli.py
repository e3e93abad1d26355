"""Command-line entry point: ``rra gen | train | eval | viz | sweep``.

Settings come from a ``key = value`` config file (``--config``) and
``--set key=value`` or dedicated flags; precedence is flag > file > default.
Defaults are the toy regime of :func:`rra.experiments.toy_train_config` and
:class:`rra.data.SyntheticSpec`.

Exit codes: 0 success, 2 usage or invalid input, 3 non-finite loss,
4 unreadable or incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("rra")


class UsageError(Exception):
    """Bad flag value, config key, path or id; maps to exit code 2."""


# ------------------------------------------------------------------ config
def _train_keys():
    from .trainer import TrainConfig

    return {f.name for f in fields(TrainConfig)}


def _data_keys():
    from .data import SyntheticSpec

    return {f.name for f in fields(SyntheticSpec)}


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        out[k] = v
    return out


def load_settings(args) -> dict[str, str]:
    """Merge config file values and ``--set`` overrides; reject unknown keys."""
    from .io import read_config

    values: dict[str, str] = {}
    if getattr(args, "config", None):
        try:
            values.update(read_config(args.config))
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        except ValueError as e:
            raise UsageError(f"invalid config {args.config}: {e}") from e
    values.update(_parse_sets(getattr(args, "set", None)))
    unknown = set(values) - _train_keys() - _data_keys()
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return values


def resolve_train_config(args, values: dict[str, str]):
    from .experiments import toy_train_config
    from .trainer import TrainConfig

    merged = toy_train_config().to_mapping()
    merged.update({k: v for k, v in values.items() if k in _train_keys()})
    flags = {"K": args.glimpses, "loss": args.loss, "total_epochs": args.epochs, "lr": args.lr,
             "seed": args.seed, "variant": getattr(args, "variant", None)}
    if getattr(args, "parallel", False):
        flags["parallel"] = True
    merged.update({k: v for k, v in flags.items() if v is not None})
    try:
        return TrainConfig.from_mapping(merged)
    except (KeyError, ValueError, TypeError) as e:
        raise UsageError(f"invalid training config: {e}") from e


def resolve_data_spec(values: dict[str, str], seed=None):
    from .data import SyntheticSpec
    from .io import _coerce

    kw = {}
    for f in fields(SyntheticSpec):
        if f.name in values:
            kw[f.name] = float(values[f.name]) if f.type == "float" else _coerce(values[f.name])
    if seed is not None:
        kw["seed"] = seed
    try:
        spec = SyntheticSpec(**kw)
        spec.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid dataset config: {e}") from e
    return spec


def _load_data(path):
    from .io import load_dataset

    try:
        return load_dataset(path)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot load dataset {path}: {e}") from e


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"output directory {out} is not writable: {e}") from e
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from e


# ------------------------------------------------------------------ commands
def cmd_gen(args) -> int:
    from .data import generate_synthetic
    from .io import save_dataset

    spec = resolve_data_spec(load_settings(args), args.seed)
    out = _out_dir(args.out)
    ds = generate_synthetic(spec)
    try:
        save_dataset(ds, out)
    except OSError as e:
        raise UsageError(f"cannot write dataset to {out}: {e}") from e
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test videos, "
          f"{ds.num_classes} classes, to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .io import format_config
    from .trainer import train

    config = resolve_train_config(args, load_settings(args))
    ds = _load_data(args.data)
    out = _out_dir(args.out)
    (out / "config.cfg").write_text(format_config(config.to_mapping()))
    result = train(config, ds, out_dir=out, resume=args.resume, initial_eval=args.initial_eval)
    if result.initial_eval is not None:
        print(f"initial top1 {result.initial_eval.top1:.6f} mean_class {result.initial_eval.mean_per_class:.6f}")
    if result.final_eval is not None:
        ev = result.final_eval
        print(f"final top1 {ev.top1:.6f} mean_class {ev.mean_per_class:.6f}")
    print(f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import SamplingSpec
    from .trainer import TrainConfig, evaluate, load_model

    model, meta, _ = load_model(args.checkpoint)
    tc = TrainConfig.from_mapping(meta["train_config"])
    ds = _load_data(args.data)
    try:
        protocol = SamplingSpec(
            args.segments if args.segments is not None else tc.eval_segments, "test", tc.seed,
            test_crops=args.crops if args.crops is not None else tc.eval_crops,
            flip=tc.eval_flip if args.flip is None else args.flip,
            input_size=tc.input_size,
            test_scale=args.scale if args.scale is not None else tc.eval_scale,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    videos = ds.test if args.split == "test" else ds.train
    ev = evaluate(model, videos, protocol, ds.num_classes, args.mode or tc.predict_mode)
    print(f"inputs per video: {ev.inputs_per_video}")
    print(f"top1 {ev.top1:.6f}")
    print(f"mean_class {ev.mean_per_class:.6f}")
    print("per_glimpse " + " ".join(f"{x:.6f}" for x in ev.per_glimpse_top1))
    if args.per_class_csv:
        with open(args.per_class_csv, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["class", "accuracy"])
            for c, acc in enumerate(ev.per_class):
                w.writerow([c, f"{acc:.6f}"])
    return EXIT_OK


def cmd_viz(args) -> int:
    from .data import SamplingSpec, test_clips
    from .trainer import TrainConfig, load_model
    from .visualize import HeatmapRequest, render_video

    model, meta, _ = load_model(args.checkpoint)
    tc = TrainConfig.from_mapping(meta["train_config"])
    ds = _load_data(args.data)
    video = next((v for v in ds.train + ds.test if v.id == args.video), None)
    if video is None:
        raise UsageError(f"unknown video id {args.video!r}")
    suppression = None
    if args.suppression:
        parts = _int_list(args.suppression)
        if len(parts) != 2:
            raise UsageError("--suppression expects k,m")
        suppression = (parts[0], parts[1])
        if not 1 <= parts[0] < model.config.K or not 1 <= parts[1] <= model.config.backbone.channels:
            raise UsageError(f"--suppression needs 1 <= k < {model.config.K} and 1 <= m <= channels")
    request = HeatmapRequest(gaussian_sigma=args.sigma, colormap=args.colormap, overlay_alpha=args.alpha)
    try:
        request.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    spec = SamplingSpec(args.frames or tc.n_segments, "test", tc.seed, input_size=tc.input_size)
    frames = test_clips(video, spec)[0]
    paths = render_video(model, frames, video.id, _out_dir(args.out), request, suppression)
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from . import experiments as ex
    from .data import generate_synthetic

    values = load_settings(args)
    base = resolve_train_config(args, values)
    ds = _load_data(args.data) if args.data else generate_synthetic(resolve_data_spec(values))
    out = _out_dir(args.out)
    seeds = _int_list(args.seeds)
    if args.kind == "losses":
        table = ex.sweep_losses(ds, base, seeds, out)
    elif args.kind == "glimpses":
        table = ex.sweep_glimpses(ds, base, _int_list(args.k), seeds, out)
    elif args.kind == "components":
        table = ex.sweep_components(ds, base, seeds, out)
    else:
        table = ex.compare_parallel(ds, base, seeds, out)
    print(table.summary(), end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def _add_common(p, train_flags: bool = False):
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    if train_flags:
        p.add_argument("--glimpses", type=int, help="number of glimpses K")
        p.add_argument("--loss", help="loss terms joined by '+', from lc, li, le")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--variant")
        p.add_argument("--parallel", action="store_true", help="independent heads, no suppression")


def build_parser() -> argparse.ArgumentParser:
    from .experiments import SWEEP_KINDS

    ap = argparse.ArgumentParser(prog="rra", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic video dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    _add_common(p, train_flags=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--initial-eval", action="store_true", help="also evaluate before the first epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--segments", type=int)
    p.add_argument("--crops", type=int, choices=(1, 5))
    p.add_argument("--flip", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--scale", type=float, help="crop side over short side")
    p.add_argument("--mode", choices=("ensemble", "concat"))
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--per-class-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render attention and suppression heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video", required=True, help="video id")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, help="sampled frames (default: training segments)")
    p.add_argument("--suppression", metavar="K,M", help="glimpse k and number of suppressed channels")
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--colormap", default="jet")
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("kind", help=f"one of {', '.join(SWEEP_KINDS)}")
    _add_common(p, train_flags=True)
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--k", default="1,2,3,4,5", help="glimpse counts for the glimpses sweep")
    p.set_defaults(func=cmd_sweep)
    return ap


def _thread_limit():
    n = os.environ.get("RRA_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=int(n))
    except ValueError as e:
        raise UsageError(f"RRA_THREADS must be an integer, got {n!r}") from e


def main(argv=None) -> int:
    from .core import NonFiniteError
    from .experiments import SWEEP_KINDS
    from .io import CheckpointError
    from .trainer import TrainingDiverged

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "sweep" and args.kind not in SWEEP_KINDS:
            raise UsageError(f"unknown sweep kind {args.kind!r}; choose from {', '.join(SWEEP_KINDS)}")
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        print(f"rra {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError) as e:
        print(f"rra {args.command}: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as e:
        print(f"rra {args.command}: checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())

"""Ablation sweeps at toy scale: loss terms, glimpse count, block components, parallel heads.

Each (setting, seed) cell trains one model and is cached as a one-row CSV
keyed by a hash of its config and the dataset, so an interrupted sweep
picks up where it stopped. Sweep tables report medians over seeds.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, SyntheticSpec
from .io import config_hash
from .rra_block import ABLATION_ORDER
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

LOSS_COMBINATIONS = ("lc", "le", "lc+le", "li", "lc+li", "li+le", "lc+li+le")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

# Full-scale published numbers, kept for side-by-side reading only.
REFERENCE = {
    "losses": {"li+le": {"concat": 82.90, "ensemble": 83.42}},
    "glimpses": {1: 80.89, 4: 83.42},
    "components": {"avg_pool": 80.20, "neg_relu": 82.75, "full": 83.42},
    "parallel": {"parallel": 82.39, "rra": 83.42},
}

CELL_COLUMNS = ["label", "seed", "K", "variant", "parallel", "loss", "top1", "top1_concat",
                "mean_class", "per_glimpse", "num_params", "final_train_loss", "cell_key"]


def toy_train_config(**overrides) -> TrainConfig:
    """Training settings under which a from-scratch backbone learns the toy task in seconds."""
    base = dict(
        lr=3e-3, lr_decay=0.1, decay_every_epochs=10, total_epochs=15, batch_size=16,
        dropout=0.0, multiscale=False, backbone_bn=True,
        eval_segments=25, eval_crops=1, eval_flip=False, eval_scale=1.0, eval_every=1000,
    )
    base.update(overrides)
    return TrainConfig(**base)


def toy_data_spec(**overrides) -> SyntheticSpec:
    return SyntheticSpec(**overrides)


def dataset_fingerprint(dataset: Dataset) -> str:
    if dataset.spec is not None:
        return config_hash(vars(dataset.spec))
    return config_hash({"ids": [v.id for v in dataset.train + dataset.test],
                        "labels": [v.label for v in dataset.train + dataset.test]})


# ------------------------------------------------------------------ cells
def _read_cell(path: Path) -> dict:
    with open(path, newline="") as f:
        row = next(csv.DictReader(f))
    out = dict(row)
    for k in ("seed", "K", "num_params"):
        out[k] = int(row[k])
    for k in ("top1", "mean_class", "final_train_loss"):
        out[k] = float(row[k])
    out["top1_concat"] = float(row["top1_concat"]) if row["top1_concat"] else None
    out["parallel"] = row["parallel"] == "True"
    out["per_glimpse"] = [float(x) for x in row["per_glimpse"].split(";")] if row["per_glimpse"] else []
    return out


def _write_cell(path: Path, cell: dict):
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CELL_COLUMNS, lineterminator="\n")
        w.writeheader()
        row = dict(cell)
        row["per_glimpse"] = ";".join(repr(x) for x in cell["per_glimpse"])
        row["top1_concat"] = "" if cell["top1_concat"] is None else repr(cell["top1_concat"])
        for k in ("top1", "mean_class", "final_train_loss"):
            row[k] = repr(float(cell[k]))
        w.writerow(row)
    os.replace(tmp, path)


def run_cell(dataset: Dataset, config: TrainConfig, label: str = "", cache_dir=None,
             concat: bool = False) -> dict:
    """Train and evaluate one configuration, reusing a cached result when present."""
    key = config_hash({"config": config.to_mapping(), "data": dataset_fingerprint(dataset), "concat": concat})
    path = Path(cache_dir) / f"cell-{key}.csv" if cache_dir is not None else None
    if path is not None and path.exists():
        cell = _read_cell(path)
        cell["label"] = label or cell["label"]
        return cell
    result = train(config, dataset)
    protocol = config.eval_protocol()
    ens = evaluate(result.model, dataset.test, protocol, dataset.num_classes, "ensemble")
    con = evaluate(result.model, dataset.test, protocol, dataset.num_classes, "concat") if concat else None
    cell = {
        "label": label, "seed": config.seed, "K": config.K, "variant": config.variant,
        "parallel": config.parallel, "loss": config.loss,
        "top1": ens.top1, "top1_concat": None if con is None else con.top1,
        "mean_class": ens.mean_per_class, "per_glimpse": ens.per_glimpse_top1,
        "num_params": result.model.num_parameters(),
        "final_train_loss": result.history[-1]["train_loss"] if result.history else float("nan"),
        "cell_key": key,
    }
    log.info("cell %s seed %d: top1 %.3f", label, config.seed, ens.top1)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_cell(path, cell)
    return cell


# ------------------------------------------------------------------ tables
@dataclass
class SweepTable:
    kind: str
    rows: list[dict]
    num_classes: int
    cells: list[dict] = field(default_factory=list, repr=False)

    @property
    def chance(self) -> float:
        return 1.0 / self.num_classes

    def row(self, label) -> dict:
        for r in self.rows:
            if r["label"] == str(label):
                return r
        raise KeyError(label)

    def to_csv(self, path):
        cols = ["label", "top1", "top1_concat", "mean_class", "per_glimpse", "num_params",
                "converged", "seeds", "top1_per_seed"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                out = dict(r)
                out["per_glimpse"] = ";".join(f"{x:.6f}" for x in r["per_glimpse"])
                out["top1_per_seed"] = ";".join(f"{x:.6f}" for x in r["top1_per_seed"])
                out["seeds"] = ";".join(str(s) for s in r["seeds"])
                out["top1"] = f"{r['top1']:.6f}"
                out["mean_class"] = f"{r['mean_class']:.6f}"
                out["top1_concat"] = "" if r["top1_concat"] is None else f"{r['top1_concat']:.6f}"
                w.writerow(out)

    def summary(self) -> str:
        return _SUMMARIES[self.kind](self)


def _median(xs):
    return float(np.median(xs))


def _aggregate(label: str, cells: list[dict], num_classes: int) -> dict:
    top1 = [c["top1"] for c in cells]
    concat = [c["top1_concat"] for c in cells if c["top1_concat"] is not None]
    glimpses = np.array([c["per_glimpse"] for c in cells])
    med = _median(top1)
    return {
        "label": label,
        "top1": med,
        "top1_concat": _median(concat) if concat else None,
        "mean_class": _median([c["mean_class"] for c in cells]),
        "per_glimpse": np.median(glimpses, axis=0).tolist() if glimpses.size else [],
        "num_params": cells[0]["num_params"],
        "converged": med >= 2.0 / num_classes,
        "seeds": [c["seed"] for c in cells],
        "top1_per_seed": top1,
    }


def _sweep(kind: str, dataset: Dataset, base: TrainConfig, settings: list[tuple[str, dict]],
           seeds: Sequence[int], out_dir=None, concat: bool = False) -> SweepTable:
    out = Path(out_dir) if out_dir is not None else None
    cache = out / "cells" if out is not None else None
    rows, all_cells = [], []
    for label, overrides in settings:
        cells = [run_cell(dataset, base.replace(seed=s, **overrides), label, cache, concat) for s in seeds]
        all_cells += cells
        rows.append(_aggregate(label, cells, dataset.num_classes))
    table = SweepTable(kind, rows, dataset.num_classes, all_cells)
    if out is not None:
        table.to_csv(out / f"{kind}.csv")
        (out / f"{kind}_summary.txt").write_text(table.summary())
    return table


def sweep_losses(dataset: Dataset, base_config: TrainConfig, seeds=DEFAULT_SEEDS, out_dir=None,
                 combinations: Sequence[str] = LOSS_COMBINATIONS) -> SweepTable:
    """One row per loss combination with ensemble and concat accuracy."""
    settings = [(c, {"loss": c}) for c in combinations]
    return _sweep("losses", dataset, base_config, settings, seeds, out_dir, concat=True)


def sweep_glimpses(dataset: Dataset, base_config: TrainConfig, K_list: Sequence[int] = (1, 2, 3, 4, 5),
                   seeds=DEFAULT_SEEDS, out_dir=None) -> SweepTable:
    if not K_list:
        raise ValueError("K_list must not be empty")
    settings = [(str(K), {"K": int(K)}) for K in K_list]
    return _sweep("glimpses", dataset, base_config, settings, seeds, out_dir)


def sweep_components(dataset: Dataset, base_config: TrainConfig, seeds=DEFAULT_SEEDS, out_dir=None,
                     variants: Sequence[str] = ABLATION_ORDER) -> SweepTable:
    """The listed ablations (all six by default) followed by the full model."""
    settings = [(v, {"variant": v}) for v in variants] + [("full", {"variant": "full"})]
    return _sweep("components", dataset, base_config, settings, seeds, out_dir)


def compare_parallel(dataset: Dataset, config: TrainConfig, seeds=DEFAULT_SEEDS, out_dir=None) -> SweepTable:
    """RRA against independent heads on the same maps, identical otherwise."""
    settings = [("rra", {"parallel": False}), ("parallel", {"parallel": True})]
    return _sweep("parallel", dataset, config, settings, seeds, out_dir)


# ------------------------------------------------------------------ summaries
def _pct(x) -> str:
    return "   -  " if x is None else f"{100 * x:6.2f}"


def _flag(r) -> str:
    return "" if r["converged"] else "  (not converged)"


def _summary_losses(t: SweepTable) -> str:
    lines = ["Loss          concat  ensemble", "-" * 31]
    for r in t.rows:
        lines.append(f"{r['label']:<12} {_pct(r['top1_concat'])}  {_pct(r['top1'])}{_flag(r)}")
    return "\n".join(lines) + "\n"


def _summary_glimpses(t: SweepTable) -> str:
    head = "#Glimpses " + " ".join(f"{r['label']:>6}" for r in t.rows)
    acc = "top-1 %   " + " ".join(_pct(r["top1"]) for r in t.rows)
    lines = [head, "-" * len(head), acc, "", "per-glimpse top-1 %"]
    for r in t.rows:
        lines.append(f"  K={r['label']}: " + " ".join(_pct(x) for x in r["per_glimpse"]))
    return "\n".join(lines) + "\n"


def _summary_components(t: SweepTable) -> str:
    lines = ["No.  variant             top-1 %", "-" * 33]
    for i, r in enumerate(t.rows, 1):
        no = "full" if r["label"] == "full" else str(ABLATION_ORDER.index(r["label"]) + 1
                                                    if r["label"] in ABLATION_ORDER else i)
        lines.append(f"{no:<4} {r['label']:<18} {_pct(r['top1'])}{_flag(r)}")
    return "\n".join(lines) + "\n"


def _summary_parallel(t: SweepTable) -> str:
    lines = ["Model      params  top-1 %", "-" * 26]
    for r in t.rows:
        lines.append(f"{r['label']:<9} {r['num_params']:>7}  {_pct(r['top1'])}{_flag(r)}")
    return "\n".join(lines) + "\n"


_SUMMARIES = {"losses": _summary_losses, "glimpses": _summary_glimpses,
              "components": _summary_components, "parallel": _summary_parallel}
SWEEP_KINDS = tuple(_SUMMARIES)

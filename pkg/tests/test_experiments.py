import numpy as np
import pytest

from rra import experiments as ex
from rra.trainer import TrainConfig

TINY = dict(stages="4:3:2,8:3:2", input_size=16, n_segments=3, batch_size=9, eval_segments=3, eval_crops=1,
            eval_flip=False, eval_scale=1.0, lr=3e-3, dropout=0.0, multiscale=False, total_epochs=1, K=2,
            eval_every=1000)


@pytest.fixture
def base():
    return TrainConfig(**TINY)


def test_loss_sweep_shape(small_dataset, base, tmp_path):
    t = ex.sweep_losses(small_dataset, base, seeds=(0,), out_dir=tmp_path)
    assert [r["label"] for r in t.rows] == list(ex.LOSS_COMBINATIONS)
    assert all(r["top1_concat"] is not None and r["top1"] is not None for r in t.rows)
    lines = (tmp_path / "losses.csv").read_text().splitlines()
    assert len(lines) == 8
    assert "ensemble" in (tmp_path / "losses_summary.txt").read_text()


def test_glimpse_sweep_rows(small_dataset, base):
    t = ex.sweep_glimpses(small_dataset, base, (1, 2, 3, 4, 5), seeds=(0,))
    assert [r["label"] for r in t.rows] == ["1", "2", "3", "4", "5"]
    assert [len(r["per_glimpse"]) for r in t.rows] == [1, 2, 3, 4, 5]
    assert t.summary().splitlines()[0].split()[1:] == ["1", "2", "3", "4", "5"]
    with pytest.raises(ValueError):
        ex.sweep_glimpses(small_dataset, base, ())


def test_component_sweep_rows(small_dataset, base):
    t = ex.sweep_components(small_dataset, base, seeds=(0,))
    assert [r["label"] for r in t.rows] == list(ex.ABLATION_ORDER) + ["full"]
    assert len(t.summary().splitlines()) == 2 + 7


def test_parallel_parameter_accounting(small_dataset, base):
    t = ex.compare_parallel(small_dataset, base.replace(K=4), seeds=(0,))
    c = 8
    extra = 3 * (c * c + c + 2 * c)  # K-1 reduction FC layers and BN affine pairs
    assert t.row("rra")["num_params"] - t.row("parallel")["num_params"] == extra


def test_medians_over_seeds(small_dataset, base):
    t = ex.sweep_glimpses(small_dataset, base, (2,), seeds=(0, 1, 2))
    r = t.rows[0]
    assert r["seeds"] == [0, 1, 2]
    assert r["top1"] == float(np.median(r["top1_per_seed"]))


def test_sweep_resumes_from_cached_cells(small_dataset, base, tmp_path, monkeypatch):
    first = ex.sweep_glimpses(small_dataset, base, (1, 2), seeds=(0, 1), out_dir=tmp_path)
    csv1 = (tmp_path / "glimpses.csv").read_bytes()

    def boom(*a, **k):
        raise AssertionError("cell should have been cached")

    monkeypatch.setattr(ex, "train", boom)
    again = ex.sweep_glimpses(small_dataset, base, (1, 2), seeds=(0, 1), out_dir=tmp_path)
    assert again.rows == first.rows
    assert (tmp_path / "glimpses.csv").read_bytes() == csv1


def test_partial_sweep_only_trains_missing_cells(small_dataset, base, tmp_path, monkeypatch):
    ex.sweep_glimpses(small_dataset, base, (1,), seeds=(0,), out_dir=tmp_path)
    calls = []
    real = ex.train

    def counting(cfg, ds, *a, **k):
        calls.append(cfg.K)
        return real(cfg, ds, *a, **k)

    monkeypatch.setattr(ex, "train", counting)
    ex.sweep_glimpses(small_dataset, base, (1, 2), seeds=(0,), out_dir=tmp_path)
    assert calls == [2]


def test_sweeps_reproducible(small_dataset, base, tmp_path):
    ex.sweep_glimpses(small_dataset, base, (1, 2), seeds=(0,), out_dir=tmp_path / "a")
    ex.sweep_glimpses(small_dataset, base, (1, 2), seeds=(0,), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "glimpses.csv").read_bytes() == (tmp_path / "b" / "glimpses.csv").read_bytes()


def test_convergence_flag():
    cells = [{"top1": 0.15, "top1_concat": None, "mean_class": 0.15, "per_glimpse": [0.15], "num_params": 1,
              "seed": s} for s in range(3)]
    row = ex._aggregate("le", cells, 10)
    assert not row["converged"]
    cells[0]["top1"] = cells[1]["top1"] = 0.2
    assert ex._aggregate("le", cells, 10)["converged"]
    t = ex.SweepTable("losses", [ex._aggregate("le", [dict(c, top1=0.1) for c in cells], 10)], 10)
    assert "not converged" in t.summary()


def test_toy_defaults():
    spec = ex.toy_data_spec()
    assert (spec.num_classes, spec.train_per_class, spec.test_per_class, spec.frames_per_video) == (10, 40, 20, 16)
    assert spec.discriminative_frame_fraction == 0.25
    cfg = ex.toy_train_config(K=3)
    assert cfg.K == 3 and cfg.eval_segments == 25

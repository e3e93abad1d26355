import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rra.core import Tensor, no_grad
from rra.data import SamplingSpec, SyntheticSpec, VideoSample, generate_synthetic, test_clips as make_test_clips
from rra.data import Dataset
from rra.heads import predict
from rra.trainer import (
    Adam,
    TemplateScorer,
    TrainConfig,
    TrainingDiverged,
    adam_update,
    evaluate,
    load_model,
    lr_at,
    model_tensors,
    save_training_checkpoint,
    total_loss,
    train,
    train_clip,
)

FAST = dict(stages="4:3:2,8:3:2", input_size=16, n_segments=3, batch_size=6, eval_segments=3, eval_crops=1,
            eval_flip=False, eval_scale=1.0, lr=3e-3, dropout=0.0, multiscale=False, total_epochs=2, K=2)


def fast_config(**kw):
    return TrainConfig(**{**FAST, **kw})


# ---------------------------------------------------------------- schedule
@pytest.mark.parametrize("epoch,want", [(0, 2e-4), (29, 2e-4), (30, 2e-5), (59, 2e-5), (60, 2e-6)])
def test_lr_at_examples(epoch, want):
    assert lr_at(epoch, TrainConfig(decay_every_epochs=30)) == pytest.approx(want, rel=1e-12)


def test_lr_non_increasing():
    cfg = TrainConfig(decay_every_epochs=7, lr_decay=0.5)
    lrs = [lr_at(e, cfg) for e in range(100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


@pytest.mark.parametrize("bad", [dict(lr=-1.0), dict(lr_decay=0.0), dict(lr_decay=1.5), dict(batch_size=0),
                                 dict(loss="lq"), dict(predict_mode="vote")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_from_mapping_coerces_strings():
    cfg = TrainConfig.from_mapping({"lr": "0.01", "K": "3", "parallel": "true", "loss": "lc"})
    assert cfg.lr == 0.01 and cfg.K == 3 and cfg.parallel is True and cfg.loss_spec.terms == ["c"]
    with pytest.raises(KeyError):
        TrainConfig.from_mapping({"learning_rate": "1"})
    assert TrainConfig.from_mapping(cfg.to_mapping()) == cfg


# ---------------------------------------------------------------- optimizer
def test_adam_zero_gradient_leaves_params_and_decays_moments():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam()
    p.grad = np.array([0.5, 0.5])
    opt.step({"p": p}, 0.1)
    m1, v1, after = opt.m["p"].copy(), opt.v["p"].copy(), p.data.copy()
    p.grad = np.zeros(2)
    opt.step({"p": p}, 0.0)
    assert_array_equal(p.data, after)
    assert_allclose(opt.m["p"], 0.9 * m1)
    assert_allclose(opt.v["p"], 0.999 * v1)


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.array([3.0]), requires_grad=True)
    p.grad = np.array([-7.5])
    Adam().step({"p": p}, 0.01)
    assert_allclose(p.data, [3.01], rtol=1e-8)


def reference_adam(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Independently scripted Adam on a float."""
    x, m, v, out = x0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(x)
    return out


def test_adam_quadratic_trajectory_matches_reference():
    p = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam()
    traj = []
    for _ in range(10):
        p.grad = 2 * (p.data - 1.0)
        opt.step({"p": p}, 0.3)
        traj.append(float(p.data[0]))
    assert_allclose(traj, reference_adam(5.0, lambda x: 2 * (x - 1.0), 0.3, 10), rtol=1e-12)


def test_adam_skips_frozen_and_checks_shape():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    a.grad = b.grad = np.ones(2)
    opt = Adam()
    opt.step({"a": a, "b": b}, 0.1, frozen=["a"])
    assert_array_equal(a.data, np.ones(2))
    assert "a" not in opt.t and opt.t["b"] == 1
    b.grad = np.ones(3)
    with pytest.raises(ValueError):
        opt.step({"b": b}, 0.1)


def test_adam_update_function_matches_class():
    p, m, v = adam_update(np.array([1.0]), np.array([2.0]), np.zeros(1), np.zeros(1), 1, 0.5)
    assert_allclose(p, [0.5])


# ---------------------------------------------------------------- training
def test_train_writes_checkpoint_and_metrics(small_dataset, tmp_path):
    res = train(fast_config(), small_dataset, out_dir=tmp_path)
    assert len(res.history) == 2
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["epoch", "lr", "train_loss", "train_loss_i", "train_loss_e", "eval_top1", "eval_mean_class"]
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert (tmp_path / "model.ckpt").exists()


def test_training_is_deterministic(small_dataset):
    a = train(fast_config(), small_dataset)
    b = train(fast_config(), small_dataset)
    assert a.history == b.history
    for (n, x), (_, y) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert_array_equal(x.data, y.data, err_msg=n)


def test_resume_reproduces_uninterrupted_run(small_dataset, tmp_path):
    cfg = fast_config(total_epochs=3, dropout=0.3, backbone_bn=True)
    full = train(cfg, small_dataset)
    train(cfg, small_dataset, out_dir=tmp_path, stop_after_epoch=1)
    resumed = train(cfg, small_dataset, resume=tmp_path / "model.ckpt")
    assert resumed.history == full.history
    for (n, x), (_, y) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert_array_equal(x.data, y.data, err_msg=n)


def test_checkpoint_round_trip_forward_bit_identical(small_dataset, tmp_path):
    res = train(fast_config(total_epochs=1, backbone_bn=True), small_dataset)
    path = tmp_path / "m.ckpt"
    save_training_checkpoint(path, res.model, fast_config(), 1, res.optimizer, res.history)
    model, meta, tensors = load_model(path)
    assert meta["epoch"] == 1 and meta["format_version"] == 1
    for k, v in model_tensors(res.model).items():
        assert_array_equal(tensors[k], v)
    clip = np.stack([train_clip(v, fast_config().train_sampling(), 0) for v in small_dataset.test[:2]])
    res.model.eval()
    model.eval()
    with no_grad():
        a = [st.scores.data for st in res.model(clip)]
        b = [st.scores.data for st in model(clip)]
    for x, y in zip(a, b):
        assert_array_equal(x, y)


def test_frozen_backbone_is_bit_identical(small_dataset):
    from rra.model import RRAModel

    cfg = fast_config(total_epochs=2, freeze_backbone_until_epoch=2, backbone_bn=True)
    init = RRAModel(cfg.model_config(small_dataset.num_classes), seed=cfg.seed)
    res = train(cfg, small_dataset)
    for (n, a), (_, b) in zip(init.backbone.named_parameters(), res.model.backbone.named_parameters()):
        assert_array_equal(a.data, b.data, err_msg=n)
    for (_, a), (_, b) in zip(init.backbone.named_batchnorms(), res.model.backbone.named_batchnorms()):
        assert_array_equal(a.running_mean, b.running_mean)
    # heads did move
    assert not np.array_equal(init.heads.W[0].data, res.model.heads.W[0].data)


def test_lr_zero_leaves_eval_unchanged(small_dataset):
    # BN statistics are frozen too: with batch statistics an lr of 0 would still shift running averages
    cfg = fast_config(total_epochs=1, lr=0.0, freeze_backbone_until_epoch=1, freeze_bn=True, backbone_bn=True)
    res = train(cfg, small_dataset, initial_eval=True)
    assert res.initial_eval.top1 == res.final_eval.top1
    assert res.initial_eval.per_class == res.final_eval.per_class


def _train_set_loss(model, cfg, ds):
    frames = np.stack([train_clip(v, cfg.train_sampling(), 0) for v in ds.train]).astype(np.float32)
    model.train()
    with no_grad():
        loss, _ = total_loss(cfg.loss_spec, model(frames, rng=0), [v.label for v in ds.train])
    return float(loss.data)


def test_first_epoch_loss_not_above_initial_loss(toy_dataset):
    from rra.experiments import toy_train_config
    from rra.model import RRAModel

    ds = Dataset(toy_dataset.train, [], toy_dataset.num_classes)  # no eval needed
    deltas = []
    for seed in range(3):
        cfg = toy_train_config(total_epochs=1, seed=seed)
        before = _train_set_loss(RRAModel(cfg.model_config(ds.num_classes), seed=seed), cfg, ds)
        after = _train_set_loss(train(cfg, ds).model, cfg, ds)
        deltas.append(after - before)
    assert np.median(deltas) <= 0


def test_nonfinite_input_raises_training_diverged(small_dataset):
    bad = VideoSample(np.full((8, 3, 32, 32), np.nan, dtype=np.float32), 0, "bad")
    ds = Dataset([bad] + small_dataset.train[:3], [], 3)
    with pytest.raises(TrainingDiverged):
        train(fast_config(total_epochs=1), ds)


# ---------------------------------------------------------------- evaluation
def test_uniform_classifier_is_at_chance(small_dataset):
    from rra.model import RRAModel

    cfg = fast_config()
    model = RRAModel(cfg.model_config(3), seed=0)
    for W in model.heads.W:
        W.data[:] = 0
    res = evaluate(model, small_dataset.test, cfg.eval_protocol(), 3)
    n = len(small_dataset.test)
    assert abs(res.top1 - 1 / 3) <= 3 * np.sqrt((1 / 3) * (2 / 3) / n)
    assert res.inputs_per_video == 3


def test_single_segment_protocol_equals_direct_pass(small_dataset):
    from rra.model import RRAModel

    cfg = fast_config()
    model = RRAModel(cfg.model_config(3), seed=4)
    protocol = SamplingSpec(1, "test", input_size=16)
    res = evaluate(model, small_dataset.test, protocol, 3)
    model.eval()
    preds = []
    for v in small_dataset.test:
        clip = make_test_clips(v, protocol)  # (1, 1, C, S, S)
        with no_grad():
            _, arg = predict(model(clip))
        preds.append(int(arg[0]))
    assert res.predictions == preds
    assert res.inputs_per_video == 1


def test_template_oracle_scores_perfectly():
    ds = generate_synthetic(SyntheticSpec(num_classes=4, train_per_class=1, test_per_class=5, noise_sigma=0.0))
    protocol = SamplingSpec(16, "test", input_size=32)
    res = evaluate(TemplateScorer(ds.templates, 4), ds.test, protocol, 4)
    assert res.top1 == 1.0 and res.mean_per_class == 1.0


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate(None, [], SamplingSpec(1, "test"), 2)

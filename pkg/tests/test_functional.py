import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_allclose, assert_array_equal

from rra.core import (
    BatchNormState,
    Tensor,
    activation,
    batchnorm,
    broadcast_add_channel,
    conv2d,
    cross_entropy,
    dropout,
    grad_check,
    one_hot,
    softmax,
    sum as tsum,
)


def test_softmax_examples():
    assert_allclose(softmax(Tensor([0.0, 0.0, 0.0, 0.0])).data, np.full(4, 0.25))
    big = softmax(Tensor([1000.0, 0.0])).data
    assert_allclose(big, [1.0, 0.0], atol=1e-300)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_is_distribution_and_shift_invariant(arr):
    p = softmax(Tensor(arr)).data
    assert np.all(p >= 0)
    assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert_allclose(softmax(Tensor(arr + 3.7)).data, p, atol=1e-12)


@pytest.mark.parametrize("kind", ["relu", "tanh", "linear", "neg_relu"])
def test_activation_values(kind):
    x = np.array([-2.0, -0.5, 0.5, 2.0])
    want = {"relu": np.maximum(x, 0), "tanh": np.tanh(x), "linear": x, "neg_relu": -np.maximum(x, 0)}[kind]
    assert_allclose(activation(Tensor(x), kind).data, want)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tanh_stays_inside_open_interval(dtype):
    y = activation(Tensor(np.array([-100.0, -20.0, 0.0, 20.0, 100.0], dtype=dtype)), "tanh").data
    assert y.dtype == dtype
    assert np.all(np.abs(y) < 1)
    assert y[0] == -y[-1]


def test_activation_unknown_kind():
    with pytest.raises(ValueError):
        activation(Tensor([1.0]), "gelu")


@pytest.mark.parametrize("kind", ["tanh", "linear", "neg_relu", "relu"])
def test_activation_gradients(kind, rng):
    x = Tensor(rng.standard_normal((3, 4)) + 0.05, requires_grad=True)  # nudged off the kink
    w = Tensor(rng.standard_normal((3, 4)))
    assert grad_check(lambda: tsum(activation(x, kind) * w), [x]).passed(1e-6)


def test_softmax_gradient(rng):
    x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 5)))
    assert grad_check(lambda: tsum(softmax(x) * w), [x]).passed(1e-6)


# ---------------------------------------------------------------- batchnorm
def test_batchnorm_train_normalizes_and_updates_running_stats(rng):
    st_ = BatchNormState(3, dtype=np.float64)
    x = rng.standard_normal((3, 50)) * 4 + 2
    y = batchnorm(Tensor(x), st_).data
    assert_allclose(y.mean(1), 0, atol=1e-12)
    assert_allclose(y.var(1), 1, atol=1e-5)
    assert_allclose(st_.running_mean, 0.1 * x.mean(1))
    assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(1, ddof=1))


def test_batchnorm_eval_uses_running_stats():
    st_ = BatchNormState(2, dtype=np.float64)
    st_.running_mean = np.array([1.0, -1.0])
    st_.running_var = np.array([4.0, 0.25])
    st_.eval()
    y = batchnorm(Tensor([[3.0], [0.0]]), st_).data
    assert_allclose(y[:, 0], [2 / np.sqrt(4 + 1e-5), 1 / np.sqrt(0.25 + 1e-5)])


def test_batchnorm_pools_over_batch_and_positions(rng):
    st_ = BatchNormState(2, dtype=np.float64)
    x = rng.standard_normal((4, 2, 6))
    y = batchnorm(Tensor(x), st_, axis=1).data
    assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-12)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(mode, rng):
    st_ = BatchNormState(3, dtype=np.float64)
    st_.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    st_.beta.data[:] = rng.standard_normal(3)
    st_.running_var = rng.uniform(0.5, 2, 3)
    st_.mode = mode
    x = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 5)))
    report = grad_check(lambda: tsum(batchnorm(x, st_, axis=1) * w), [x, st_.gamma, st_.beta])
    assert report.passed(1e-4)


def test_batchnorm_channel_mismatch():
    with pytest.raises(ValueError):
        batchnorm(Tensor(np.ones((4, 5))), BatchNormState(3))


# ---------------------------------------------------------------- misc ops
def test_broadcast_add_channel_example():
    X = Tensor(np.zeros((2, 3)))
    out = broadcast_add_channel(X, Tensor([1.0, -1.0]))
    assert_array_equal(out.data, [[1, 1, 1], [-1, -1, -1]])


def test_broadcast_add_channel_gradient(rng):
    X = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    v = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 4)))
    assert grad_check(lambda: tsum(broadcast_add_channel(X, v) * w), [X, v]).passed(1e-6)


def test_dropout_inverted_scaling_and_eval_identity():
    x = Tensor(np.ones(10000))
    y = dropout(x, 0.3, training=True, rng=0).data
    assert set(np.unique(np.round(y, 6))) <= {0.0, round(1 / 0.7, 6)}
    assert abs(y.mean() - 1.0) < 0.05
    assert dropout(x, 0.3, training=False) is x


def test_dropout_gradient_uses_same_mask():
    x = Tensor(np.ones(20), requires_grad=True)
    y = dropout(x, 0.5, training=True, rng=3)
    y.sum().backward()
    assert_array_equal(x.grad, y.data)


def test_cross_entropy_examples():
    assert_allclose(cross_entropy(Tensor([[0.25, 0.75]]), [[0.0, 1.0]]).data, [-np.log(0.75)])
    # log floor keeps a zero probability finite
    assert_allclose(cross_entropy(Tensor([[1.0, 0.0]]), [[0.0, 1.0]]).data, [-np.log(1e-12)])


def test_cross_entropy_validates_distributions():
    with pytest.raises(ValueError):
        cross_entropy(Tensor([[0.5, 0.6]]), [[0.0, 1.0]])
    with pytest.raises(ValueError):
        cross_entropy(Tensor([[0.5, 0.5]]), [[0.0, 2.0]])


def test_cross_entropy_gradient(rng):
    p = rng.uniform(0.1, 1, (3, 4))
    logits = Tensor(np.log(p), requires_grad=True)
    y = one_hot([0, 3, 1], 4)
    assert grad_check(lambda: tsum(cross_entropy(softmax(logits), y)), [logits]).passed(1e-6)


# ---------------------------------------------------------------- conv
def _conv_reference(x, w, b, stride, pad):
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, f, i, j] = (patch * w[f]).sum() + b[f]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loops(stride, pad, rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    assert_allclose(got, _conv_reference(x, w, b, stride, pad), atol=1e-12)


def test_conv2d_gradient(rng):
    x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    r = Tensor(rng.standard_normal((2, 3, 3, 3)))
    assert grad_check(lambda: tsum(conv2d(x, w, b, stride=2, padding=1) * r), [x, w, b]).passed(1e-6)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_allclose, assert_array_equal

from rra.core import (
    NonFiniteError,
    Tensor,
    add,
    check_finite,
    div,
    exp,
    grad_check,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    reshape,
    stack,
    sub,
    sum as tsum,
    transpose,
)


def param(rng, *shape, positive=False):
    data = rng.uniform(0.5, 2.0, shape) if positive else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


def test_add_broadcast_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([10.0, 20.0], requires_grad=True)
    out = a + b
    assert_array_equal(out.data, [[11, 22], [13, 24]])
    out.sum().backward()
    assert_array_equal(a.grad, np.ones((2, 2)))
    assert_array_equal(b.grad, [2.0, 2.0])


def test_mul_and_div_grads_closed_form():
    a = Tensor([3.0], requires_grad=True)
    b = Tensor([2.0], requires_grad=True)
    (a * b).backward()
    assert a.grad[0] == 2.0 and b.grad[0] == 3.0
    a.zero_grad(), b.zero_grad()
    (a / b).backward()
    assert_allclose(a.grad, [0.5])
    assert_allclose(b.grad, [-0.75])


def test_matmul_shapes_and_grad():
    A = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    B = Tensor(np.ones((3, 4)), requires_grad=True)
    C = A @ B
    assert C.shape == (2, 4)
    C.sum().backward()
    assert_array_equal(A.grad, np.full((2, 3), 4.0))
    assert_array_equal(B.grad, np.repeat(A.data.sum(0)[:, None], 4, axis=1))


def test_matmul_rejects_vectors():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_shared_node_gradient_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x + x
    y.backward()
    assert_allclose(x.grad, [5.0])


def test_deep_chain_does_not_recurse():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.backward()
    assert_allclose(x.grad, [1.0])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = (x * 3).sum()
    assert not y.requires_grad


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        log(Tensor([-1.0]))
    with check_finite(False):
        assert np.isnan(log(Tensor([-1.0])).data[0])


def test_integer_input_becomes_float64():
    assert Tensor([1, 2]).dtype == np.float64


def test_float32_preserved_with_python_scalars():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 2.5 + 1).dtype == np.float32


@pytest.mark.parametrize(
    "name,fn,shapes,positive",
    [
        ("add", lambda a, b: tsum(add(a, b) * a), [(3, 4), (4,)], False),
        ("sub", lambda a, b: tsum(sub(a, b) * a), [(3, 4), (3, 1)], False),
        ("mul", lambda a, b: tsum(mul(a, b)), [(2, 3), (2, 3)], False),
        ("div", lambda a, b: tsum(div(a, b)), [(2, 3), (3,)], True),
        ("neg", lambda a: tsum(neg(a) * a), [(5,)], False),
        ("exp", lambda a: tsum(exp(a)), [(2, 2)], False),
        ("log", lambda a: tsum(log(a)), [(2, 3)], True),
        ("mean", lambda a: tsum(mean(a, axis=1) * mean(a, axis=1)), [(3, 4)], False),
        ("sum_keepdims", lambda a: tsum(tsum(a, axis=0, keepdims=True) * a), [(3, 2)], False),
        ("reshape", lambda a: tsum(reshape(a, (6,)) * Tensor(np.arange(6.0))), [(2, 3)], False),
        ("transpose", lambda a: tsum(transpose(a, (1, 0, 2)) * Tensor(np.arange(24.0).reshape(3, 2, 4))),
         [(2, 3, 4)], False),
        ("stack", lambda a, b: tsum(stack([a, b], axis=1) * stack([b, a], axis=1)), [(3,), (3,)], False),
        ("matmul", lambda a, b: tsum(matmul(a, b) * matmul(a, b)), [(3, 4), (4, 2)], False),
        ("matmul_batched", lambda a, b: tsum(matmul(a, b)), [(2, 3, 4), (4, 5)], False),
    ],
)
def test_op_gradients_match_finite_differences(name, fn, shapes, positive, rng):
    params = [param(rng, *s, positive=positive) for s in shapes]
    report = grad_check(lambda: fn(*params), params)
    assert report.passed(1e-6), (name, report.per_param)


def test_grad_check_requires_float64():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: p.sum(), [p])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-10, 10)))
def test_sum_backward_is_ones(arr):
    x = Tensor(arr, requires_grad=True)
    x.sum().backward()
    assert_array_equal(x.grad, np.ones_like(arr))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4))
def test_unbroadcast_restores_shape(r, c):
    a = Tensor(np.ones((r, c)), requires_grad=True)
    b = Tensor(np.ones((1, c)), requires_grad=True)
    s = Tensor(2.0, requires_grad=True)
    ((a + b) * s).sum().backward()
    assert b.grad.shape == (1, c)
    assert_allclose(b.grad, np.full((1, c), 2.0 * r))
    assert_allclose(s.grad, 2.0 * r * c)

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from busunet.engine import tensor as T
from busunet.engine.tensor import GradTape, Tensor, backward, no_grad
from busunet.errors import ShapeError, UsageError


def leaf(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True, dtype=dtype)


def test_integer_input_becomes_float32():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert t.shape == (3,)


def test_grad_of_sum_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_sum_of_squares_is_twice_x(rng):
    x = leaf(rng.standard_normal((3, 4)))
    backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-12)


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(UsageError):
        backward(T.mul(x, x))


def test_unused_parameter_gets_zero_gradient():
    x, unused = leaf([1.0, 2.0]), leaf([[3.0]])
    backward(T.sum(x), [x, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros((1, 1)))


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = T.mul(x, x)
    backward(T.sum(T.add(y, y)))  # d/dx 2x^2 = 4x
    np.testing.assert_allclose(x.grad, [12.0])


def test_tape_visits_each_node_once_in_topological_order():
    x = leaf([1.0, 2.0])
    a = T.mul(x, x)
    b = T.add(a, x)
    c = T.sum(T.mul(a, b))
    tape = GradTape(c)
    ids = [id(n) for n in tape.order]
    assert len(ids) == len(set(ids))
    for node in tape.order:
        for parent in node._parents:
            if parent.requires_grad:
                assert tape.index[id(parent)] < tape.index[id(node)]


def test_deep_chain_does_not_overflow_recursion():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = T.add(y, x)
    backward(T.sum(y))
    assert x.grad[0] == 5001.0


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_elementwise_shape_mismatch(op):
    with pytest.raises(ShapeError):
        op(leaf(np.ones((2, 3))), leaf(np.ones((3, 2))))


def test_add_zero_and_mul_one_are_identities(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), dtype=np.float64)
    np.testing.assert_array_equal(T.add(x, Tensor(np.zeros((2, 3, 4)), dtype=np.float64)).data, x.data)
    np.testing.assert_array_equal(T.mul(x, Tensor(np.ones((2, 3, 4)), dtype=np.float64)).data, x.data)


def test_activation_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert T.tanh(Tensor([0.0])).data[0] == 0.0


def test_sigmoid_derivative_at_zero_matches_finite_difference():
    x = leaf([0.0])
    backward(T.sum(T.sigmoid(x)))
    h = 1e-5
    fd = (1 / (1 + np.exp(-h)) - 1 / (1 + np.exp(h))) / (2 * h)
    assert abs(x.grad[0] - 0.25) < 1e-12
    assert abs(x.grad[0] - fd) < 1e-6


def test_sigmoid_is_finite_for_extreme_inputs():
    out = T.sigmoid(Tensor([-1e4, 1e4], dtype=np.float64)).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_concat_channel_counts_add():
    a, b = Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 5, 4, 4)))
    assert T.concat([a, b], axis=1).shape == (2, 8, 4, 4)


def test_concat_routes_gradient_slices_to_sources():
    a = leaf(np.zeros((1, 1, 2, 2)))
    b = leaf(np.zeros((1, 1, 2, 2)))
    weights = np.arange(8.0).reshape(1, 2, 2, 2)
    backward(T.sum(T.mul(T.concat([a, b], axis=1), Tensor(weights, dtype=np.float64))))
    np.testing.assert_array_equal(a.grad, weights[:, :1])
    np.testing.assert_array_equal(b.grad, weights[:, 1:])


def test_concat_mismatch_raises():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5)))], axis=1)


@settings(max_examples=40, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 4), min_size=1, max_size=4),
    seed=st.integers(0, 2**16),
)
def test_concat_then_split_round_trips_bit_exactly(sizes, seed):
    rng = np.random.default_rng(seed)
    parts = [Tensor(rng.standard_normal((2, s, 3))) for s in sizes]
    back = T.split(T.concat(parts, axis=1), sizes, axis=1)
    for p, q in zip(parts, back):
        np.testing.assert_array_equal(p.data, q.data)


def test_split_sizes_must_cover_axis():
    with pytest.raises(ShapeError):
        T.split(Tensor(np.zeros((1, 5))), [2, 2], axis=1)


def test_narrow_gradient_is_zero_outside_window():
    x = leaf(np.ones((1, 4)))
    backward(T.sum(T.narrow(x, 1, 1, 3)))
    np.testing.assert_array_equal(x.grad, [[0, 1, 1, 0]])


def test_matmul_gradients(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    backward(T.sum(T.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_mean_and_reshape():
    x = leaf(np.arange(6.0))
    y = T.reshape(x, (2, 3))
    assert y.shape == (2, 3)
    backward(T.mean(y))
    np.testing.assert_allclose(x.grad, np.full(6, 1 / 6))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_no_grad_is_thread_local():
    x = leaf([2.0])
    seen = {}

    def worker():
        seen["other"] = T.mul(x, x).requires_grad

    with no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        seen["here"] = T.mul(x, x).requires_grad
    assert seen == {"other": True, "here": False}


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
def test_forward_outputs_stay_finite(values):
    x = Tensor(values, dtype=np.float64)
    y = T.add(T.tanh(x), T.mul(T.sigmoid(x), T.relu(x)))
    assert np.all(np.isfinite(y.data))

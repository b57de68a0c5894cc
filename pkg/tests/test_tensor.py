import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentbank import tensor as T
from latentbank.tensor import Tape, Tensor


def grads_of(f, *values):
    leaves = [Tensor(v, trainable=True, dtype=np.float64) for v in values]
    with Tape() as tape:
        loss = f(*leaves)
    return loss, tape.gradient(loss, leaves)


def test_softmax_known_values():
    y = T.softmax_rows(Tensor([[0.0, math.log(3.0)]], dtype=np.float64))
    np.testing.assert_allclose(y.data, [[0.25, 0.75]], rtol=1e-15)


def test_softmax_survives_large_logits():
    y = T.softmax_rows(Tensor([[1000.0, 1000.0]]))
    np.testing.assert_array_equal(y.data, [[0.5, 0.5]])


def test_rms_norm_known_values():
    y = T.rms_norm(Tensor([[3.0, 4.0]], dtype=np.float64), eps=0.0)
    r = math.sqrt(12.5)
    np.testing.assert_allclose(y.data, [[3 / r, 4 / r]], rtol=1e-15)


def test_sigmoid_extremes_are_finite():
    y = T.sigmoid(Tensor([-800.0, 0.0, 800.0], dtype=np.float64))
    np.testing.assert_array_equal(y.data, [0.0, 0.5, 1.0])


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 3, 4)))
    w = np.full((2, 3), 1 / 6)
    loss = T.cross_entropy(logits, np.zeros((2, 3), dtype=int), w)
    assert loss.item() == pytest.approx(math.log(4), rel=1e-6)


def test_matmul_gradient_oracle():
    a = np.arange(6.0).reshape(2, 3)
    b = np.arange(12.0).reshape(3, 4) / 10
    _, (ga, gb) = grads_of(lambda x, y: T.total(x @ y), a, b)
    np.testing.assert_allclose(ga, np.ones((2, 4)) @ b.T)
    np.testing.assert_allclose(gb, a.T @ np.ones((2, 4)))


def test_reused_leaf_accumulates():
    _, (g,) = grads_of(lambda x: T.total(x * x), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(g, [2.0, -4.0, 6.0])


def test_row_broadcast_gradient_sums_over_rows():
    _, (_, gb) = grads_of(lambda x, b: T.total(x + b), np.ones((3, 2)), np.zeros(2))
    np.testing.assert_array_equal(gb, [3.0, 3.0])


def test_detach_blocks_gradient():
    _, (g,) = grads_of(lambda x: T.total(T.detach(x) * x), np.array([2.0, 5.0]))
    np.testing.assert_array_equal(g, [2.0, 5.0])


def test_constant_leaf_gets_no_gradient():
    frozen = Tensor([1.0, 2.0])
    x = Tensor([3.0, 4.0], trainable=True)
    with Tape() as tape:
        loss = T.total(x * frozen)
    grads = T.backward(tape, loss, [x, frozen])
    assert set(grads) == {id(x)}
    assert not frozen.tracked


def test_ops_outside_tape_are_untracked():
    x = Tensor([1.0], trainable=True)
    assert not (x * 2.0).tracked


def test_unreachable_leaf_gets_zeros():
    x = Tensor([1.0, 2.0], trainable=True)
    y = Tensor([5.0], trainable=True)
    with Tape() as tape:
        loss = T.total(x)
    assert tape.gradient(loss, [y])[0].tolist() == [0.0]


def test_tensor_is_immutable():
    x = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        x.data[0] = 5.0


@pytest.mark.parametrize(
    "a,b",
    [((2, 3), (3, 2)), ((2, 3), (2,)), ((2, 3, 4), (2, 4))],
)
def test_elementwise_shape_errors(a, b):
    with pytest.raises(T.DimensionError):
        T.add(Tensor(np.ones(a)), Tensor(np.ones(b)))


def test_matmul_shape_errors():
    with pytest.raises(T.DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(T.DimensionError):
        Tensor(np.ones((2, 2, 3))) @ Tensor(np.ones((3, 2, 1)))


def test_non_finite_rejected():
    with pytest.raises(T.NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(T.NonFiniteError):
        with np.errstate(over="ignore"):
            T.mul(Tensor([1e30], dtype=np.float32), 1e30)


def test_loss_must_be_scalar():
    x = Tensor([1.0, 2.0], trainable=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(T.ContractError):
        tape.gradient(y, [x])


def test_precision_context_restores_default():
    assert T.default_dtype() == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def _composite(x, w, b):
    h = T.rms_norm(T.relu(x @ w) + b)
    s = T.softmax_rows(h)
    return T.mean(T.sigmoid(s @ T.transpose(w)) * x)


small = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 4)), elements=st.floats(-2, 2))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(2, 4), st.integers(0, 2**16))
def test_composite_gradients_match_finite_differences(n, d, seed):
    r = np.random.default_rng(seed)
    x, w, b = r.normal(size=(n, d)), r.normal(size=(d, d)), r.normal(size=d)
    with T.precision(np.float64):
        err = T.grad_check(_composite, [x, w, b], h=1e-6)
    assert err <= 1e-5


@settings(max_examples=25, deadline=None)
@given(small)
def test_softmax_rows_are_distributions(x):
    y = T.softmax_rows(Tensor(x, dtype=np.float64)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(small, small)
def test_concat_then_slice_roundtrip(a, b):
    if a.shape[1] != b.shape[1]:
        b = np.resize(b, (b.shape[0], a.shape[1]))
    c = T.concat_rows(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
    np.testing.assert_array_equal(T.slice_rows(c, a.shape[0]).data, b)
    np.testing.assert_array_equal(T.slice_rows(c, 0, a.shape[0]).data, a)


def test_batched_matmul_and_permute_gradients():
    r = np.random.default_rng(1)
    a, b = r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 3))
    f = lambda x, y: T.total(T.permute(x @ y, (0, 2, 1)) * T.reshape(T.permute(x @ y, (0, 1, 2)), (2, 3, 3)))
    with T.precision(np.float64):
        assert T.grad_check(f, [a, b], h=1e-6) <= 1e-6

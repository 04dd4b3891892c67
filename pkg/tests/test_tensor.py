from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossmodal import tensor as T
from crossmodal.errors import ContractError, ShapeError
from crossmodal.tensor import AdamWState, Tensor, adamw_step, backward, clip_grad_global_norm

from helpers import gradcheck

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# matmul


def test_matmul_identity():
    out = Tensor(np.eye(2)) @ Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    ref = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_matmul_dimension_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# softmax and sigmoid


def test_softmax_uniform_row():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_large_logits_stable():
    with np.errstate(over="raise"):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert out[0, 0] == 1.0 and 0.0 <= out[0, 1] < 1e-300


def test_softmax_matches_high_precision(rng):
    getcontext().prec = 80
    x = rng.normal(size=(3, 4)) * 3
    out = T.softmax_rows(Tensor(x)).data
    for i in range(3):
        ex = [Decimal(float(v)).exp() for v in x[i]]
        total = sum(ex)
        for j in range(4):
            assert abs(float(ex[j] / total) - out[i, j]) < 1e-12


def test_sigmoid_values(rng):
    assert T.sigmoid(Tensor(0.0)).data == 0.5
    x = rng.normal(size=50) * 4
    np.testing.assert_allclose(T.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=0, atol=1e-15)


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_sigmoid_symmetry(x):
    s = T.sigmoid(Tensor(x)).data + T.sigmoid(Tensor(-x)).data
    np.testing.assert_allclose(s, 1.0, atol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(x):
    out = T.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_log_softmax_consistent_with_softmax(x):
    np.testing.assert_allclose(np.exp(T.log_softmax_rows(Tensor(x)).data), T.softmax_rows(Tensor(x)).data, atol=1e-12)


# backward


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    backward(x * x)
    assert x.grad == 6.0


def test_backward_unused_leaf_has_zero_or_no_grad():
    x = Tensor(2.0, requires_grad=True)
    w = Tensor(5.0, requires_grad=True)
    backward(x * x + 0.0 * w)
    assert w.grad == 0.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_leaf_gradients_accumulate():
    x = Tensor(2.0, requires_grad=True)
    backward(x * 3.0)
    backward(x * 3.0)
    assert x.grad == 6.0
    T.zero_grad([x])
    assert x.grad is None


def test_shared_subexpression_counted_once_per_use():
    x = Tensor(1.5, requires_grad=True)
    y = x * x
    backward(y + y * y)
    assert x.grad == pytest.approx(2 * 1.5 + 4 * 1.5**3)


def test_no_grad_records_nothing():
    x = Tensor(2.0, requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad and y._parents == ()


def test_broadcast_rules():
    m = Tensor(np.ones((3, 2)))
    assert (m + Tensor([1.0, 2.0])).shape == (3, 2)
    assert (m * Tensor(2.0)).shape == (3, 2)
    with pytest.raises(ShapeError):
        m * Tensor([1.0, 2.0])
    with pytest.raises(ShapeError):
        m + Tensor(np.ones((2, 3)))


def test_mlp_gradients_match_finite_differences(rng):
    x = rng.normal(size=(5, 4))

    def build(w1, b1, w2, b2):
        h = T.sigmoid(Tensor(x) @ w1 + b1)
        return T.sigmoid(h @ w2 + b2).sum()

    arrays_ = [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=(6, 2)), rng.normal(size=2)]
    assert gradcheck(build, arrays_) < 1e-6


def test_gather_rows_padding_and_sparse_path(rng):
    a = rng.normal(size=(6000, 3))
    idx = rng.integers(-1, 6000, size=9000)
    leaf = Tensor(a, requires_grad=True)
    g = rng.normal(size=(9000, 3))
    out = T.gather_rows(leaf, idx)
    assert np.all(out.data[idx < 0] == 0)
    backward((out * Tensor(g)).sum())
    ref = np.zeros_like(a)
    np.add.at(ref, idx[idx >= 0], g[idx >= 0])
    np.testing.assert_allclose(leaf.grad, ref, atol=1e-12)


def test_l2_normalize_zero_row():
    x = Tensor([[0.0, 0.0], [3.0, 4.0]], requires_grad=True)
    out = T.l2_normalize_rows(x)
    np.testing.assert_allclose(out.data, [[0, 0], [0.6, 0.8]])
    backward(out.sum())
    assert np.all(x.grad[0] == 0)


# AdamW and clipping


def test_adamw_reference_step():
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([0.5])
    adamw_step([w], AdamWState(lr=0.1, weight_decay=0.1))
    # m_hat/(sqrt(v_hat)+eps) = 0.5/(0.5+1e-8); decay term 0.1*1
    expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.1 * 1.0)
    assert w.data[0] == pytest.approx(expected, abs=1e-15)
    assert w.data[0] == pytest.approx(0.89, abs=1e-8)


def test_adamw_null_update():
    w = Tensor([1.5, -2.0], requires_grad=True)
    w.grad = np.zeros(2)
    adamw_step([w], AdamWState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(w.data, [1.5, -2.0])


def test_adamw_identical_params_identical_updates(rng):
    data, grads = rng.normal(size=4), rng.normal(size=(3, 4))
    a, b = Tensor(data.copy(), requires_grad=True), Tensor(data.copy(), requires_grad=True)
    state = AdamWState(lr=0.01)
    for g in grads:
        a.grad, b.grad = g.copy(), g.copy()
        adamw_step([a, b], state)
    np.testing.assert_array_equal(a.data, b.data)


def test_adamw_missing_grad():
    with pytest.raises(ContractError):
        adamw_step([Tensor([1.0], requires_grad=True)], AdamWState())


def test_clip_below_threshold():
    p = Tensor([0.3, 0.4], requires_grad=True)
    p.grad = np.array([0.3, 0.4])
    assert clip_grad_global_norm([p], 1.0) == pytest.approx(0.5)
    np.testing.assert_array_equal(p.grad, [0.3, 0.4])


def test_clip_scales_to_unit_norm():
    p = Tensor([0.0, 0.0], requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_global_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(p.grad, [0.6, 0.8], atol=1e-15)


def test_clip_zero_grads():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.zeros(1)
    assert clip_grad_global_norm([p], 1.0) == 0.0
    np.testing.assert_array_equal(p.grad, [0.0])


@settings(max_examples=50)
@given(
    arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)),
    st.floats(1e-3, 10),
)
def test_clip_property(g1, g2, max_norm):
    a, b = Tensor(np.zeros_like(g1), requires_grad=True), Tensor(np.zeros_like(g2), requires_grad=True)
    a.grad, b.grad = g1.copy(), g2.copy()
    pre = clip_grad_global_norm([a, b], max_norm)
    assert pre == pytest.approx(np.sqrt((g1**2).sum() + (g2**2).sum()))
    assert T.global_grad_norm([a, b]) <= max_norm * (1 + 1e-12) + 1e-300

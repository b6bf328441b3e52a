import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moelora.tensor import (
    Tensor,
    gelu,
    grad_check,
    layer_norm,
    log_softmax_nll,
    make_rng,
    matmul,
    softmax,
    tanh,
    tsum,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_examples():
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor([[1.0], [2.0]])).data, [[1.0], [2.0]])
    assert np.array_equal(matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]])).data, [[2.0], [4.0]])
    out = matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(12.0).reshape(3, 4)))
    assert out.shape == (2, 4) and not out.data.any()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_examples():
    assert np.allclose(softmax(Tensor([1.0, 1.0, 1.0])).data, 1 / 3, atol=1e-15)
    # exp arithmetic: e^2, e^1, e^0 normalised
    assert np.allclose(softmax(Tensor([2.0, 1.0, 0.0])).data, [0.66524, 0.24473, 0.09003], atol=5e-6)
    big = softmax(Tensor([1000.0, 0.0])).data
    assert big[0] == 1.0 and big[1] == 0.0


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        softmax(Tensor([1.0, np.nan]))
    with pytest.raises(FloatingPointError):
        softmax(Tensor([np.inf, 0.0]))


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_sums_to_one(v):
    y = softmax(Tensor(v)).data
    assert abs(y.sum() - 1.0) <= 1e-12
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(y[order]) >= 0)


def test_nll_examples():
    assert log_softmax_nll(Tensor([[0.0, 0.0]]), [0]).data == pytest.approx(np.log(2))
    # -log(1 / (1 + e^-20)) = log1p(e^-20)
    assert log_softmax_nll(Tensor([[10.0, -10.0]]), [0]).data == pytest.approx(2.0611536e-9, rel=1e-6)
    assert log_softmax_nll(Tensor([[10.0, -10.0]]), [1]).data == pytest.approx(20.0, rel=1e-9)


def test_nll_validation():
    with pytest.raises(ValueError):
        log_softmax_nll(Tensor([[0.0, 0.0]]), [2])
    with pytest.raises(ValueError):
        log_softmax_nll(Tensor([[0.0, 0.0, 0.0]]), [0])
    with pytest.raises(ValueError):
        log_softmax_nll(Tensor([[0.0, 0.0]]), [0, 1])


def test_nll_gradient_is_prob_minus_onehot():
    logits = Tensor([[0.3, -1.2], [2.0, 0.5], [-0.4, 0.1]], requires_grad=True)
    labels = np.array([0, 1, 1])
    log_softmax_nll(logits, labels).backward()
    p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    expected = (p - np.eye(2)[labels]) / 3
    assert np.allclose(logits.grad, expected, atol=1e-15)


def test_backward_outer_product_matches_finite_differences():
    W = Tensor(np.arange(6.0).reshape(2, 3) / 7, requires_grad=True)
    x = Tensor([[0.5], [-1.0], [2.0]])
    tsum(matmul(W, x)).backward()
    assert np.allclose(W.grad, np.tile(x.data.T, (2, 1)))
    assert grad_check(lambda: tsum(matmul(W, x)), [W]) < 1e-8


def test_backward_unused_param_zero_and_frozen_absent():
    p = Tensor([1.0, 2.0], requires_grad=True)
    w = Tensor([3.0], requires_grad=True)
    frozen = Tensor([4.0])
    loss = tsum(w * frozen)
    loss.backward()
    assert p.grad is None or not p.grad.any()
    assert frozen.grad is None or not frozen.grad.any()


def test_backward_requires_scalar_and_single_use():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (w * 2.0).backward()
    loss = tsum(w * w)
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_grad_check_quadratic_and_frozen():
    w = Tensor(np.array([0.3, -1.5, 2.0]), requires_grad=True)
    frozen = Tensor(np.array([1.0, 2.0, 3.0]))
    assert grad_check(lambda: tsum(w * w), [w, frozen]) < 1e-8
    assert frozen.grad is None


def test_grad_check_flags_nondeterminism():
    w = Tensor([1.0], requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(RuntimeError):
        grad_check(lambda: tsum(w * rng.normal()), [w])
    with pytest.raises(ValueError):
        grad_check(lambda: tsum(w * w), [w], eps=1e-2)


def test_elementwise_and_layer_norm_gradients():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    gamma = Tensor(rng.normal(size=5), requires_grad=True)
    beta = Tensor(rng.normal(size=5), requires_grad=True)
    c = rng.normal(size=(3, 5))
    f = lambda: tsum(gelu(layer_norm(x, gamma, beta)) * c + tanh(x) * c)
    assert grad_check(f, [x, gamma, beta]) < 1e-7
    s = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    assert grad_check(lambda: tsum(softmax(s, axis=-1) * c[:2, :4]), [s]) < 1e-8


def test_gelu_tanh_approximation_values():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(gelu(Tensor(x)).data, ref, atol=1e-15)


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matmul_associativity(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=s)) for s in ((m, k), (k, n), (n, p)))
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    assert np.allclose(left, right, rtol=1e-9, atol=1e-12)


@given(st.integers(0, 2**63 - 1), st.lists(st.integers(0, 1000), max_size=3))
def test_rng_reproducible(seed, stream):
    a = make_rng(seed, *stream).standard_normal(16)
    b = make_rng(seed, *stream).standard_normal(16)
    assert np.array_equal(a, b)


def test_rng_streams_differ():
    assert not np.array_equal(make_rng(0, 0).standard_normal(4), make_rng(0, 1).standard_normal(4))

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from prepretrain import tensor as T
from prepretrain.tensor import GradError, Tensor

from gradcases import GRAD_CASES, run_case


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_suite(name):
    assert run_case(name, instances=20) < 1e-4


def test_square_grad():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.sum_(x * x))
    assert x.grad[0] == pytest.approx(6.0)


def test_sum_grad_is_ones():
    x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    T.backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_gelu_grad_matches_closed_form():
    # d/dx x*Phi(x) = Phi(x) + x*phi(x)
    with T.oracle_mode():
        x = Tensor([0.5], requires_grad=True)
        T.backward(T.sum_(T.gelu(x)))
        assert x.grad[0] == pytest.approx(norm.cdf(0.5) + 0.5 * norm.pdf(0.5), abs=1e-10)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradError):
        T.backward(x * 2.0)                       # not scalar
    with pytest.raises(GradError):
        T.backward(T.sum_(Tensor(np.ones(3))))    # detached
    loss = T.sum_(x * 2.0)
    T.backward(loss)
    with pytest.raises(GradError):
        T.backward(loss)                          # consumed
    with pytest.raises(GradError):
        T.backward(T.sum_(x * 3.0))               # stale leaf grad
    T.zero_grad([x])
    T.backward(T.sum_(x * 3.0))
    assert np.allclose(x.grad, 3.0)


def test_tape_visits_each_node_once():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    loss = T.sum_(y * y + y)
    tape = T.backward(loss)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    assert np.allclose(x.grad, 2.0 * (2 * 2.0 + 1))


def test_non_finite_raises():
    with pytest.raises(FloatingPointError):
        T.log(Tensor([0.0]))


def test_default_and_oracle_dtypes():
    assert Tensor([1.0]).data.dtype == np.float32
    with T.oracle_mode():
        assert Tensor([1.0]).data.dtype == np.float64
        assert T.gelu(Tensor([1.0])).data.dtype == np.float64
    assert T.gelu(Tensor([1.0])).data.dtype == np.float32


def test_layer_norm_example():
    with T.oracle_mode():
        out = T.layer_norm(Tensor([[1.0, 2.0, 3.0, 4.0]]), np.ones(4), np.zeros(4)).data
    # population variance 1.25
    expect = (np.array([1, 2, 3, 4]) - 2.5) / math.sqrt(1.25 + 1e-6)
    assert np.allclose(out, expect, atol=1e-3)
    assert np.allclose(out, [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-3)


def test_layer_norm_constant_row_and_zero_gain():
    with T.oracle_mode():
        assert np.allclose(T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), np.ones(3), np.zeros(3)).data, 0.0)
        beta = np.array([0.1, -0.2, 0.3])
        out = T.layer_norm(Tensor(np.random.default_rng(0).standard_normal((2, 3))), np.zeros(3), beta).data
        assert np.allclose(out, np.broadcast_to(beta, (2, 3)))


def test_layer_norm_empty_axis():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.zeros((2, 0))), np.zeros(0), np.zeros(0))


def test_xent_uniform_example():
    t = np.array([[0.5, 0.5, 0.0, 0.0]])
    assert float(T.softmax_cross_entropy_soft(np.zeros((1, 4)), t).data) == pytest.approx(math.log(4), abs=1e-6)


def test_xent_margin_limit():
    t = np.array([[1.0, 0.0, 0.0]])
    losses = [float(T.softmax_cross_entropy_soft(np.array([[g, 0.0, 0.0]]), t).data) for g in (1, 10, 40)]
    assert losses[0] > losses[1] > losses[2] >= 0 and losses[2] < 1e-12


def test_xent_term_by_term_oracle():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 8))
    t = rng.random((4, 8))
    t /= t.sum(1, keepdims=True)
    total = 0.0
    for b in range(4):
        lse = math.log(sum(math.exp(v) for v in z[b]))
        total += -sum(t[b, c] * (z[b, c] - lse) for c in range(8))
    with T.oracle_mode():
        assert float(T.softmax_cross_entropy_soft(z, t).data) == pytest.approx(total / 4, abs=1e-6)


def test_xent_rejects_non_distribution():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy_soft(np.zeros((1, 3)), np.array([[0.5, 0.6, 0.0]]))
    with pytest.raises(ValueError):
        T.softmax_cross_entropy_soft(np.zeros((1, 2)), np.array([[1.5, -0.5]]))


@given(st.integers(1, 5), st.integers(2, 9), st.integers(0, 2**31))
def test_xent_bounded_by_entropy(b, c, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((b, c)) * 3
    t = rng.random((b, c)) ** 3
    t /= t.sum(1, keepdims=True)
    with T.oracle_mode():
        loss = float(T.softmax_cross_entropy_soft(z, t).data)
    assert loss - float(np.mean(T.entropy(t))) >= -1e-6


def test_xent_equals_entropy_at_match():
    t = np.array([[0.2, 0.3, 0.5]])
    with T.oracle_mode():
        loss = float(T.softmax_cross_entropy_soft(np.log(t), t).data)
    assert loss == pytest.approx(float(T.entropy(t)[0]), abs=1e-12)


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_ops_are_deterministic(x):
    with T.oracle_mode():
        a = T.softmax(T.gelu(Tensor(x))).data
        b = T.softmax(T.gelu(Tensor(x))).data
    assert a.tobytes() == b.tobytes()


def test_gradcheck_requires_oracle_mode():
    with pytest.raises(GradError):
        T.gradcheck(T.exp, [np.ones(2)])


def test_gradcheck_flags_a_wrong_gradient():
    def bad_square(x):
        x = T.as_tensor(x)
        return T._node(x.data ** 2, (x,), lambda g: (g * x.data,), "bad")   # missing factor 2

    with T.oracle_mode():
        rep = T.gradcheck(bad_square, [np.array([1.0, 2.0])])
    assert not rep.passed

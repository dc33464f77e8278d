import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf

from transfa import autodiff as ad
from transfa.errors import ContractError, DimensionError, DomainError

from conftest import gradient_error

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_add_and_relu_values():
    assert np.array_equal(ad.elementwise("add", [1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])
    assert np.array_equal(ad.elementwise("relu", [-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])


def test_exp_gradient_matches_e():
    x = ad.Tensor([0.0, 1.0], requires_grad=True)
    ad.exp(x).sum().backward()
    assert np.allclose(x.grad, [1.0, math.e], rtol=1e-12)
    num = ad.numerical_gradient(lambda: float(np.exp(x.data).sum()), x.data)
    assert ad.relative_error(x.grad, num) < 1e-8


def test_matmul_values_and_errors():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(np.eye(2), m).data, m)
    assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert gradient_error(lambda x, y: ad.matmul(x, y).sum(), a, b) <= 1e-6


def test_batched_matmul_gradient(rng):
    a, b = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(2, 3, 4, 2))
    assert gradient_error(lambda x, y: (ad.matmul(x, y) ** 2).sum(), a, b) <= 1e-6


def test_softmax_values():
    assert np.allclose(ad.softmax([0.0, 0.0]).data, [0.5, 0.5])
    assert np.array_equal(ad.softmax([1000.0, 1000.0]).data, [0.5, 0.5])
    e = math.e
    assert np.allclose(ad.softmax([1.0, 0.0]).data, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    assert np.allclose(ad.softmax([1.0, 0.0]).data, [0.73106, 0.26894], atol=1e-5)


@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(x, c):
    p = ad.softmax(x, axis=-1).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12, rtol=0)
    assert np.allclose(ad.softmax(x + c, axis=-1).data, p, atol=1e-12, rtol=0)


def test_layer_norm_values():
    one, zero = np.ones(4), np.zeros(4)
    assert np.array_equal(ad.layer_norm(np.full((2, 4), 3.0), one, zero).data, np.zeros((2, 4)))
    out = ad.layer_norm([[1.0, 3.0]], np.ones(2), np.zeros(2), eps=1e-5).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_gradient(rng):
    x, g, b = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    w = rng.normal(size=(3, 6))
    assert gradient_error(lambda x, g, b: (ad.layer_norm(x, g, b) * w).sum(), x, g, b) <= 1e-5


def test_backward_simple_rules():
    x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))
    a, b = ad.Tensor(3.0, requires_grad=True), ad.Tensor(-2.0, requires_grad=True)
    (a * b).backward()
    assert a.grad == -2.0 and b.grad == 3.0


def test_backward_rejects_vector_root():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_mlp_parameters_match_finite_differences(rng):
    x = rng.normal(size=(5, 4))
    w1, b1, w2, b2 = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=(6, 1)), rng.normal(size=1)

    def mlp(w1, b1, w2, b2):
        h = ad.gelu(ad.matmul(x, w1) + b1)
        return (ad.sigmoid(ad.matmul(h, w2) + b2) ** 2).sum()

    assert gradient_error(mlp, w1, b1, w2, b2) <= 1e-5


@pytest.mark.parametrize("op", ["exp", "neg", "relu", "gelu", "sigmoid"])
def test_unary_gradients(op, rng):
    x = rng.normal(size=(4, 3)) + 0.05  # keep relu away from its kink
    assert gradient_error(lambda t: (ad.elementwise(op, t) * x).sum(), x) <= 1e-5


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcast(op, rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.uniform(0.5, 2.0, size=(4,))
    assert gradient_error(lambda s, t: (ad.elementwise(op, s, t) ** 2).sum(), a, b) <= 1e-5


def test_log_sqrt_power_gradients(rng):
    x = rng.uniform(0.5, 3.0, size=(3, 3))
    assert gradient_error(lambda t: (ad.log(t) + ad.sqrt(t) + ad.power(t, -0.5)).sum(), x) <= 1e-5


def test_shape_op_gradients(rng):
    x = rng.normal(size=(2, 4, 4, 3))
    w = rng.normal(size=(2, 4, 4, 3))

    def f(t):
        r = ad.roll(t, (1, -2), (1, 2)) * w
        p = ad.pad(r, ((0, 0), (0, 1), (0, 1), (0, 0)))
        q = p.reshape(2, 25, 3).transpose(0, 2, 1)
        c = ad.concat([q[:, :, :5], q[:, :, 10:]], axis=-1)
        return (c * c).sum() + ad.log_softmax(t, axis=-1)[:, 0].sum()

    assert gradient_error(f, x) <= 1e-5


def test_gelu_is_exact_erf_form():
    x = np.linspace(-3, 3, 13)
    expect = 0.5 * x * (1 + erf(x / np.sqrt(2)))
    assert np.allclose(ad.gelu(x).data, expect, rtol=0, atol=1e-15)


def test_domain_and_shape_errors():
    with pytest.raises(DomainError):
        ad.log([1.0, 0.0])
    with pytest.raises(DomainError):
        ad.div([1.0], [0.0])
    with pytest.raises(DimensionError):
        ad.add(np.ones((2, 3)), np.ones((4,)))


def test_backward_is_deterministic(rng):
    w = ad.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = rng.normal(size=(3, 4))
    loss = ad.softmax(ad.matmul(x, w), axis=-1).sum() + (w * w).mean()
    loss.backward()
    first = w.grad.copy()
    loss.backward()
    assert np.array_equal(first, w.grad)


def test_grad_reaches_intermediates():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    mid = x * 3.0
    (g_mid, g_x) = ad.grad((mid * mid).sum(), [mid, x])
    assert np.allclose(g_mid, [6.0, 12.0])
    assert np.allclose(g_x, [18.0, 36.0])


def test_no_grad_records_nothing():
    x = ad.Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2
    assert not y.requires_grad


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_matmul_gradient_property(a, b):
    assert gradient_error(lambda x, y: (ad.matmul(x, y) ** 2).sum(), a, b) <= 1e-5

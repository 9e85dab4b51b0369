import numpy as np
import pytest

from tenvoo import autodiff as ad
from tenvoo.autodiff import GraphError, Parameter, backward, finite_diff_check, no_grad


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        o = x[idx]
        x[idx] = o + eps
        fp = f()
        x[idx] = o - eps
        fm = f()
        x[idx] = o
        g[idx] = (fp - fm) / (2 * eps)
    return g


UNARY = [
    ("exp", ad.exp, lambda v: v),
    ("log", ad.log, lambda v: np.abs(v) + 0.5),
    ("sqrt", ad.sqrt, lambda v: np.abs(v) + 0.5),
    ("sigmoid", ad.sigmoid, lambda v: v),
    ("silu", ad.silu, lambda v: v),
    ("neg", ad.neg, lambda v: v),
    ("power", lambda a: ad.power(a, 3.0), lambda v: v),
    ("softmax", lambda a: ad.softmax(a, axis=-1), lambda v: v),
    ("sum_axis", lambda a: ad.sum(a, axis=1, keepdims=True), lambda v: v),
    ("mean", lambda a: ad.mean(a, axis=0), lambda v: v),
    ("reshape", lambda a: ad.reshape(a, (4, 3)), lambda v: v),
    ("transpose", lambda a: ad.transpose(a, (1, 0)), lambda v: v),
]


@pytest.mark.parametrize("name,op,prep", UNARY, ids=[u[0] for u in UNARY])
def test_unary_gradients(name, op, prep, rng):
    p = Parameter("p", prep(rng.normal(size=(3, 4))))
    w = rng.normal(size=op(p).shape)

    def loss():
        return ad.sum(ad.mul(op(p), w))

    g = backward(loss())["p"]
    with no_grad():
        num = numeric_grad(lambda: float(loss().value), p.value)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-8)


BINARY = [
    ("add", ad.add, (3, 4), (4,)),
    ("sub", ad.sub, (3, 1), (3, 4)),
    ("mul", ad.mul, (3, 4), (1, 4)),
    ("div", ad.div, (3, 4), (3, 4)),
    ("matmul", ad.matmul, (2, 3, 4), (4, 5)),
]


@pytest.mark.parametrize("name,op,sa,sb", BINARY, ids=[b[0] for b in BINARY])
def test_binary_gradients_with_broadcast(name, op, sa, sb, rng):
    a = Parameter("a", rng.normal(size=sa))
    b = Parameter("b", rng.normal(size=sb) + (3.0 if name == "div" else 0.0))
    w = rng.normal(size=op(a, b).shape)

    def loss():
        return ad.sum(ad.mul(op(a, b), w))

    g = backward(loss())
    with no_grad():
        for p in (a, b):
            num = numeric_grad(lambda: float(loss().value), p.value)
            np.testing.assert_allclose(g[p.name], num, rtol=1e-6, atol=1e-8)


def test_tensordot_gradient_any_axes(rng):
    a = Parameter("a", rng.normal(size=(2, 3, 4)))
    b = Parameter("b", rng.normal(size=(4, 5, 3)))
    w = rng.normal(size=(2, 5))

    def loss():
        return ad.sum(ad.mul(ad.tensordot(a, b, axes=([2, 1], [0, 2])), w))

    g = backward(loss())
    with no_grad():
        for p in (a, b):
            np.testing.assert_allclose(g[p.name], numeric_grad(lambda: float(loss().value), p.value),
                                       rtol=1e-6, atol=1e-8)


def test_concat_gradient(rng):
    a = Parameter("a", rng.normal(size=(2, 3)))
    b = Parameter("b", rng.normal(size=(2, 2)))
    w = rng.normal(size=(2, 5))
    g = backward(ad.sum(ad.mul(ad.concat([a, b], axis=1), w)))
    np.testing.assert_allclose(g["a"], w[:, :3])
    np.testing.assert_allclose(g["b"], w[:, 3:])


def test_fan_out_accumulates():
    x = Parameter("x", np.array([3.0]))
    y = ad.add(ad.mul(x, x), ad.mul(x, 2.0))
    assert backward(ad.sum(y))["x"][0] == pytest.approx(8.0)


def test_mse_loss_value_and_grad(rng):
    p = Parameter("p", rng.normal(size=(5,)))
    t = rng.normal(size=(5,))
    loss = ad.mse_loss(p, t)
    assert float(loss.value) == pytest.approx(np.mean((p.value - t) ** 2))
    np.testing.assert_allclose(backward(loss)["p"], 2 * (p.value - t) / 5)


def test_frozen_parameters_get_no_gradient(rng):
    w = Parameter("w", rng.normal(size=(3,)), trainable=False)
    b = Parameter("b", rng.normal(size=(3,)))
    g = backward(ad.sum(ad.mul(ad.add(w, b), w)))
    assert set(g) == {"b"}


def test_no_grad_records_nothing(rng):
    p = Parameter("p", rng.normal(size=(3,)))
    with no_grad():
        y = ad.mul(p, 2.0)
    assert y.inputs == () and not y.requires_grad
    assert backward(ad.sum(y)) == {}


def test_backward_needs_scalar(rng):
    p = Parameter("p", rng.normal(size=(3,)))
    with pytest.raises(GraphError):
        backward(ad.mul(p, 2.0))


def test_duplicate_names_rejected():
    a, b = Parameter("x", np.ones(2)), Parameter("x", np.ones(2))
    with pytest.raises(GraphError, match="share the name"):
        backward(ad.sum(ad.add(a, b)))


def test_deep_graph_is_iterative():
    p = Parameter("p", np.array(1.0))
    y = p
    for _ in range(5000):
        y = ad.add(y, 0.0)
    assert backward(y)["p"] == pytest.approx(1.0)


def test_finite_diff_check_helper(rng):
    p = Parameter("p", rng.normal(size=(4,)))
    err = finite_diff_check(lambda: ad.sum(ad.exp(p)), p)
    assert err < 1e-7

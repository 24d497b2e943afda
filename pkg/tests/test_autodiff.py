"""Finite-difference checks and graph semantics of the autodiff engine."""

import numpy as np
import pytest
from gradcheck import fd_gradient, rel_err

from infodpcca import autodiff as ad
from infodpcca.errors import ShapeMismatch


def _scalarize(v, proj):
    return ad.sum_all(ad.mul(v, proj))


def _check(build, arrays, tol=1e-6, eps=1e-5):
    """build(list_of_vars) -> Var of any shape; FD vs analytic on each input."""
    rng = np.random.default_rng(42)
    out_shape = build([ad.lift(a) for a in arrays]).value.shape
    proj = rng.normal(size=out_shape) if out_shape else np.asarray(1.0)

    leaves = [ad.leaf(a) for a in arrays]
    loss = _scalarize(build(leaves), proj)
    loss.backward()
    for i, a in enumerate(arrays):
        analytic = leaves[i].grad
        if analytic is None:
            analytic = np.zeros_like(a)

        def f():
            ls = [ad.lift(arr) for arr in arrays]
            return float(_scalarize(build(ls), proj).value)

        fd = fd_gradient(f, a, eps)
        assert rel_err(analytic, fd) < tol, f"input {i}"


RNG = np.random.default_rng(0)
A = RNG.normal(size=(3, 4))
B = RNG.normal(size=(4, 2))
C = RNG.normal(size=(3, 4))
BIAS = RNG.normal(size=4)
POS = RNG.uniform(0.5, 2.0, size=(3, 4))


@pytest.mark.parametrize("name,build,arrays", [
    ("matmul", lambda v: ad.matmul(v[0], v[1]), [A, B]),
    ("affine", lambda v: ad.affine(v[0], v[1], v[2]), [A.copy(), B, RNG.normal(size=2)]),
    ("add", lambda v: ad.add(v[0], v[1]), [A, C]),
    ("add_bias", lambda v: ad.add(v[0], v[1]), [A, BIAS]),
    ("sub", lambda v: ad.sub(v[0], v[1]), [A, C]),
    ("mul", lambda v: ad.mul(v[0], v[1]), [A, C]),
    ("scale", lambda v: ad.scale(v[0], -2.5), [A]),
    ("tanh", lambda v: ad.tanh(v[0]), [A]),
    ("sigmoid", lambda v: ad.sigmoid(v[0]), [A]),
    ("relu", lambda v: ad.relu(v[0]), [A + 0.05]),
    ("exp", lambda v: ad.exp(v[0]), [A]),
    ("log", lambda v: ad.log(v[0]), [POS]),
    ("square", lambda v: ad.square(v[0]), [A]),
    ("softplus", lambda v: ad.softplus(v[0]), [A]),
    ("concat", lambda v: ad.concat_cols(v), [A, C, POS]),
    ("slice", lambda v: ad.slice_cols(v[0], 1, 3), [A]),
    ("sum_all", lambda v: ad.sum_all(v[0]), [A]),
    ("mean_all", lambda v: ad.mean_all(v[0]), [A]),
    ("add_n", lambda v: ad.add_n(v), [A, C, A * 0.5]),
    ("reuse", lambda v: ad.mul(v[0], ad.add(v[0], v[0])), [A]),
])
def test_op_gradients(name, build, arrays):
    _check(build, [a.copy() for a in arrays])


def test_gru_gates_gradients():
    rng = np.random.default_rng(5)
    ax = rng.normal(size=(3, 12))
    ah = rng.normal(size=(3, 12))
    h = rng.uniform(-0.8, 0.8, size=(3, 4))
    _check(lambda v: ad.gru_gates(v[0], v[1], v[2]), [ax, ah, h], tol=1e-6)


def test_gauss_vec_gradients():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 4))
    mu = rng.normal(size=(3, 4))
    sig = rng.uniform(0.4, 1.8, size=(3, 4))
    mu2 = rng.normal(size=(3, 4))
    sig2 = rng.uniform(0.4, 1.8, size=(3, 4))
    _check(lambda v: ad.gauss_logpdf_vec(v[0], v[1], v[2]), [x, mu, sig])
    _check(lambda v: ad.gauss_entropy_vec(v[0]), [sig])
    _check(lambda v: ad.gauss_cross_entropy_vec(*v), [mu, sig, mu2, sig2])
    _check(lambda v: ad.gauss_kl_vec(*v), [mu, sig, mu2, sig2])


def test_gradient_accumulates_on_reused_node():
    x = ad.leaf(np.array([2.0, 3.0]))
    y = ad.sum_all(ad.add(ad.mul(x, x), x))  # x^2 + x
    y.backward()
    np.testing.assert_allclose(x.grad, np.array([5.0, 7.0]))


def test_constants_get_no_grad():
    c = ad.lift(np.ones((2, 2)))
    x = ad.leaf(np.ones((2, 2)))
    out = ad.sum_all(ad.mul(c, x))
    out.backward()
    assert c.grad is None
    assert x.grad is not None


def test_constant_only_graph_has_no_backward():
    out = ad.mul(ad.lift(np.ones(3)), ad.lift(np.ones(3)))
    assert not out.requires_grad


def test_backward_requires_scalar():
    x = ad.leaf(np.ones(3))
    with pytest.raises(ShapeMismatch):
        ad.mul(x, x).backward()


def test_unbroadcast_bias_and_scalar():
    b = ad.leaf(np.array([1.0, 2.0]))
    s = ad.leaf(np.asarray(3.0))
    big = ad.lift(np.ones((4, 2)))
    out = ad.sum_all(ad.add(ad.mul(big, s), b))
    out.backward()
    np.testing.assert_allclose(b.grad, np.array([4.0, 4.0]))
    np.testing.assert_allclose(s.grad, 8.0)

import numpy as np
import pytest

from mdcnn import autodiff as ad
from mdcnn.manifolds import SPD, Sphere

from conftest import random_spd, random_unit


def grad_of(f, *args):
    rec = ad.DiffRecord()
    leaves = [rec.param(a) for a in args]
    loss = f(*leaves)
    rec.backward(loss)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves], rec


def numeric_grad(f, args, i, h=1e-6, sym=False):
    x = np.array(args[i], dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        d = np.zeros_like(x)
        d[idx] = h
        if sym:
            d = 0.5 * (d + np.swapaxes(d, -1, -2))
        a_p, a_m = list(args), list(args)
        a_p[i], a_m[i] = x + d, x - d
        g[idx] = (float(f(*a_p)) - float(f(*a_m))) / (2 * h)
    return g


def check(f, *args, sym=(), rtol=1e-6, atol=1e-8):
    grads, rec = grad_of(f, *args)
    for i, g in enumerate(grads):
        num = numeric_grad(f, args, i, sym=i in sym)
        if i in sym:
            g = 0.5 * (g + np.swapaxes(g, -1, -2))
            # a symmetric perturbation of an off-diagonal pair moves both entries
            num = 0.5 * (num + np.swapaxes(num, -1, -2))
        np.testing.assert_allclose(g, num, rtol=rtol, atol=atol)
    return rec


def test_constant_loss_has_zero_gradient():
    grads, _ = grad_of(lambda x: ad.add(ad.sum(ad.mul(x, 0.0)), 3.0), np.ones(3))
    np.testing.assert_array_equal(grads[0], 0.0)


def test_elementwise_ops(rng):
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    y = rng.uniform(0.5, 2.0, size=(4,))
    check(lambda a, b: ad.sum(ad.div(ad.mul(a, b), ad.add(a, 1.0))), x, y)
    check(lambda a: ad.sum(ad.log(ad.sqrt(ad.exp(a)))), x)
    check(lambda a: ad.sum(ad.atan2(ad.sin(a), ad.cos(ad.square(a)))), x)
    check(lambda a, b: ad.sum(ad.sub(a, b) - ad.neg(a) / b), x, y)


def test_sinc_near_zero():
    x = np.array([0.0, 1e-6, 1e-3, 0.5, 2.0])
    vals = ad.sinc(x)
    np.testing.assert_allclose(vals[1:], np.sin(x[1:]) / x[1:], rtol=1e-15)
    assert vals[0] == 1.0
    check(lambda a: ad.sum(ad.sinc(a)), np.array([1e-6, 1e-3, 0.5, 2.0]))


def test_shape_ops(rng):
    x = rng.normal(size=(2, 3, 4))
    check(lambda a: ad.sum(ad.square(ad.cumsum(a, axis=-1))), x)
    check(lambda a: ad.sum(ad.square(ad.reshape(a, (6, 4))[1:4] * 2.0)), x)
    check(lambda a: ad.sum(ad.square(ad.concat([a, a[:, :1]], axis=1))), x)
    check(lambda a: ad.sum(ad.square(ad.broadcast_to(a[:, :1], (2, 5, 4)))), x)
    rows, cols = np.array([0, 1, 1]), np.array([2, 0, 2])
    check(lambda a: ad.sum(ad.square(ad.getitem(a, (rows, cols)))), x)
    check(lambda a: ad.sum(ad.where(np.arange(4) < 2, ad.square(a), a)), x)


def test_matmul_and_cross_entropy(rng):
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    check(lambda a, b: ad.sum(ad.square(ad.matmul(a, b))), A, B)
    labels = np.array([0, 1, 1])
    check(lambda a, b: ad.softmax_cross_entropy(ad.matmul(a, b), labels), A, B)


def test_cross_entropy_value():
    logits = np.array([[0.0, 0.0], [10.0, -10.0]])
    rec = ad.DiffRecord()
    loss = ad.softmax_cross_entropy(rec.param(logits), np.array([1, 0]))
    assert float(loss.value) == pytest.approx(0.5 * (np.log(2) + np.log1p(np.exp(-20))))


@pytest.mark.parametrize("kind", ["sqrt", "invsqrt", "log", "exp"])
def test_matfun_adjoint(rng, kind):
    A = random_spd(rng, 3, spread=0.5, size=(2,))
    W = rng.normal(size=(2, 3, 3))
    rec = check(lambda a: ad.sum(ad.mul(ad.matfun(a, kind), W)), A, sym=(0,))
    assert rec.diagnostics["fd_fallback_nodes"] == 0


def test_matpow_adjoint_in_matrix_and_exponent(rng):
    A = random_spd(rng, 3, spread=0.5, size=(2,))
    t = np.array([0.3, 0.8])
    W = rng.normal(size=(2, 3, 3))
    check(lambda a, s: ad.sum(ad.mul(ad.matpow(a, s), W)), A, t, sym=(0,))


def test_gap_guard_uses_finite_differences(rng):
    A = np.stack([np.eye(3), np.diag([1.0, 2.0, 2.0]), random_spd(rng, 3)])
    W = rng.normal(size=(3, 3, 3))
    rec = check(lambda a: ad.sum(ad.mul(ad.matfun(a, "log"), W)), A, sym=(0,), rtol=1e-5, atol=1e-7)
    assert rec.diagnostics["fd_fallback_nodes"] >= 1
    assert rec.diagnostics["fd_fallback_matrices"] == 2


def test_geodesic_stationary_at_endpoint(rng):
    # d^2(Gamma(X, Y, t), Y) = (1 - t)^2 d^2(X, Y) has zero slope at t = 1
    M = SPD(3)
    X, Y = random_spd(rng, 3, size=(2,))
    grads, _ = grad_of(lambda t: M.dist2(M.geodesic(X, Y, t), Y), np.array(1.0))
    assert abs(grads[0]) < 1e-8
    grads, _ = grad_of(lambda t: M.dist2(M.geodesic(X, Y, t), Y), np.array(0.25))
    assert grads[0] == pytest.approx(-2 * 0.75 * M.dist2(X, Y), rel=1e-8)


@pytest.mark.parametrize("space", [SPD(3), Sphere(5)])
def test_geometry_gradients(rng, space):
    if isinstance(space, SPD):
        X, Y = random_spd(rng, 3, spread=0.5, size=(2, 2))
    else:
        X, Y = random_unit(rng, 5, (2, 2))
    t = np.array([0.2, 0.7])
    target = space.geodesic(X[::-1], Y, 0.5)
    sym = (1, 2) if isinstance(space, SPD) else ()

    def f(tt, x, y):
        return ad.sum(space.dist2(space.geodesic(x, y, tt), target))

    if isinstance(space, Sphere):
        # ambient gradients only match along the sphere; check through the tangent-free argument t
        grads, _ = grad_of(f, t, X, Y)
        num = numeric_grad(lambda tt: f(tt, X, Y), [t], 0)
        np.testing.assert_allclose(grads[0], num, rtol=1e-6, atol=1e-9)
    else:
        check(f, t, X, Y, sym=sym)


def test_corrupt_scales_adjoint_only():
    rec = ad.DiffRecord()
    x = rec.param(np.array([1.0, 2.0]))
    y = ad.corrupt(x, 1.5)
    np.testing.assert_array_equal(ad.value(y), [1.0, 2.0])
    rec.backward(ad.sum(ad.square(y)))
    np.testing.assert_allclose(x.grad, 1.5 * np.array([2.0, 4.0]))


def test_plain_arrays_are_not_recorded(rng):
    A = random_spd(rng, 3)
    out = ad.matfun(A, "log")
    assert isinstance(out, np.ndarray)

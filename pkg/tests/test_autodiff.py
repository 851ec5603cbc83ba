"""Reverse-mode primitives against central finite differences."""

import numpy as np
import pytest

from mdgnn import autodiff as ad
from mdgnn import perm_weights as pw


def fd_check(fn, *arrays, eps=1e-6, rtol=1e-6):
    """Compare ``grad(sum(w * fn(*params)))`` with central differences for every input."""
    r = np.random.default_rng(0)
    params = [ad.param(a) for a in arrays]
    out = fn(*params)
    weights = r.standard_normal(out.shape)
    loss = (out * weights).sum()
    grads = ad.grad(loss, params)
    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            vals = []
            for s in (1, -1):
                shifted = [x.copy() for x in arrays]
                shifted[k][idx] += s * eps
                vals.append(np.sum(fn(*[ad.Tensor(x) for x in shifted]).value * weights))
            num[idx] = (vals[0] - vals[1]) / (2 * eps)
        scale = max(1.0, np.abs(num).max())
        np.testing.assert_allclose(grads[k], num, atol=rtol * scale)


@pytest.fixture
def x(rng):
    return rng.standard_normal((3, 4))


@pytest.fixture
def y(rng):
    return rng.standard_normal((3, 4))


UNARY = [ad.square, ad.exp, ad.sigmoid, ad.softplus, ad.log_sigmoid, ad.tanh, ad.leaky_relu,
         lambda a: ad.maximum(a, 0.3), lambda a: ad.logsumexp(a, axis=1),
         lambda a: ad.logsumexp(a, axis=0, keepdims=True), lambda a: ad.mean(a, axis=1),
         lambda a: a.sum(axis=(0, 1), keepdims=True), lambda a: ad.reshape(a, (4, 3)),
         lambda a: ad.transpose(a, (1, 0)), lambda a: ad.moveaxis(a, 0, 1),
         lambda a: a[1:, ::2], lambda a: a[:, [0, 0, 2]],
         lambda a: ad.broadcast_to(ad.reshape(a, (1, 3, 4)), (2, 3, 4)), lambda a: -a]


@pytest.mark.parametrize("fn", UNARY)
def test_unary(fn, x):
    fd_check(fn, x + 0.05)   # keep clear of kinks at zero


def test_positive_domain(x):
    fd_check(ad.log, np.abs(x) + 0.5)
    fd_check(ad.sqrt, np.abs(x) + 0.5)


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
def test_binary(op, x, y):
    fd_check(op, x, y)


def test_div(x, y):
    fd_check(ad.div, x, np.abs(y) + 0.5)


def test_broadcasting(x, rng):
    fd_check(lambda a, b: a * b + b, x, rng.standard_normal((1, 4)))
    fd_check(lambda a, b: a / b, x, np.abs(rng.standard_normal(4)) + 1.0)


def test_where_concat_stack(x, y):
    cond = x > 0
    fd_check(lambda a, b: ad.where(cond, a, b), x, y)
    fd_check(lambda a, b: ad.concat([a, b], axis=1), x, y)
    fd_check(lambda a, b: ad.stack([a, b], axis=1), x, y)


def test_einsum(rng):
    a, b, c = rng.standard_normal((2, 3)), rng.standard_normal((3, 4)), rng.standard_normal(4)
    fd_check(lambda p, q: ad.einsum("ij,jk->ik", p, q), a, b)
    fd_check(lambda p, q, r: ad.einsum("ij,jk,k->i", p, q, r), a, b, c)
    # a letter present in only one operand and absent from the output
    fd_check(lambda p, q: ad.einsum("ij,kl->ik", p, q), a, b)


def test_einsum_rejects_unsupported():
    with pytest.raises(ValueError):
        ad.einsum("ii->i", np.eye(2))
    with pytest.raises(ValueError):
        ad.einsum("...i->i", np.eye(2))


def test_structured_apply(rng):
    s = pw.PermStructure((2, 3, 2), ("outer", "inner", "set"), 2, 3, topological=False)
    blocks = rng.standard_normal(pw.block_shape(s))
    z = rng.standard_normal((2, 2, 2, 3, 2))
    fd_check(lambda w, v: ad.structured_apply(w, v, s), blocks, z)


def test_masked_sum(rng):
    mask = rng.uniform(size=(2, 2, 3, 2, 3))
    x = rng.standard_normal((2, 4, 2, 3, 2))
    fd_check(ad.masked_sum, mask, x)


def test_channel_gains(rng):
    h = rng.standard_normal((2, 3, 2, 2)) + 1j * rng.standard_normal((2, 3, 2, 2))
    wr, wi = rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 3, 2, 2))
    out = ad.channel_gains(h, wr, wi).value
    ref = np.einsum("bmkn,bmin->bki", np.conj(h), wr + 1j * wi)
    np.testing.assert_allclose(out[0] + 1j * out[1], ref, atol=1e-12)
    fd_check(lambda a, b: ad.channel_gains(h, a, b), wr, wi)


def test_shared_node_accumulates(x):
    p = ad.param(x)
    loss = (p * p + p).sum()
    np.testing.assert_allclose(ad.grad(loss, p), 2 * x + 1)


def test_unused_leaf_gets_zero(x):
    p, q = ad.param(x), ad.param(x)
    g = ad.grad(p.sum(), [p, q])
    np.testing.assert_array_equal(g[1], 0.0)


def test_rejects_non_scalar_and_nonfinite(x):
    with pytest.raises(ValueError):
        ad.grad(ad.param(x), ad.param(x))
    p = ad.param(np.array([np.inf]))
    with pytest.raises(FloatingPointError):
        ad.grad(p.sum(), p)

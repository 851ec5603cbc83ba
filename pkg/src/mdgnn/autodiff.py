"""Tape-based reverse-mode differentiation on numpy arrays.

Only the primitives needed by the models in this package are provided.
Every operation creates a :class:`Tensor` holding its value, its parents and
a vector-Jacobian product closure.  Nodes are numbered in creation order, so
the reverse sweep in :meth:`Tape.gradient` is a plain descending sort and
each node is visited exactly once.
"""

from __future__ import annotations

import itertools
import string

import numpy as np

from . import kernels
from . import perm_weights as pw

_counter = itertools.count()


class Tensor:
    __slots__ = ("value", "parents", "vjp", "id", "name")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.id = next(_counter)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    # arithmetic sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def param(value, name=None) -> Tensor:
    """A leaf whose gradient is requested."""
    return Tensor(np.array(value, dtype=np.float64), name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for a, n in enumerate(shape):
        if n == 1 and g.shape[a] != 1:
            g = g.sum(axis=a, keepdims=True)
    return g


def _node(value, parents, vjp):
    parents = tuple(as_tensor(p) for p in parents)
    return Tensor(value, parents, vjp)


class Tape:
    """Reverse sweep over the graph reachable from ``loss``."""

    @staticmethod
    def gradient(loss: Tensor, wrt):
        if loss.value.size != 1:
            raise ValueError("loss must be a scalar")
        if not np.isfinite(loss.value).all():
            raise FloatingPointError(f"non-finite loss {float(loss.value)}")
        # collect reachable nodes
        nodes, stack, seen = [], [loss], {loss.id}
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t.parents:
                if p.id not in seen:
                    seen.add(p.id)
                    stack.append(p)
        nodes.sort(key=lambda t: t.id, reverse=True)
        grads = {loss.id: np.ones_like(loss.value)}
        for t in nodes:
            g = grads.pop(t.id, None) if t.parents else grads.get(t.id)
            if g is None or t.vjp is None:
                continue
            for p, gp in zip(t.parents, t.vjp(g)):
                if gp is None:
                    continue
                gp = _unbroadcast(np.asarray(gp, dtype=np.float64), p.shape)
                if p.id in grads:
                    grads[p.id] = grads[p.id] + gp
                else:
                    grads[p.id] = gp
        single = isinstance(wrt, Tensor)
        items = [wrt] if single else list(wrt)
        out = [grads.get(t.id, np.zeros_like(t.value)) for t in items]
        return out[0] if single else out


def grad(loss: Tensor, wrt):
    return Tape.gradient(loss, wrt)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _node(out, (a, b), lambda g: (g / b.value, -g * out / b.value))


def square(a):
    a = as_tensor(a)
    return _node(a.value ** 2, (a,), lambda g: (2.0 * g * a.value,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _node(out, (a,), lambda g: (0.5 * g / out,))


def sigmoid_value(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    out = sigmoid_value(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus_value(x):
    return np.logaddexp(0.0, x)


def softplus(a):
    a = as_tensor(a)
    return _node(softplus_value(a.value), (a,), lambda g: (g * sigmoid_value(a.value),))


def log_sigmoid(a):
    """``log(sigmoid(a))`` without overflow."""
    a = as_tensor(a)
    return _node(-softplus_value(-a.value), (a,), lambda g: (g * sigmoid_value(-a.value),))


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    d = np.where(a.value > 0, 1.0, slope)
    return _node(a.value * d, (a,), lambda g: (g * d,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def identity(a):
    return as_tensor(a)


def maximum(a, c: float):
    """``max(a, c)`` for a constant ``c``; ties route the gradient to ``a``."""
    a = as_tensor(a)
    d = (a.value >= c).astype(np.float64)
    return _node(np.maximum(a.value, c), (a,), lambda g: (g * d,))


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _node(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


ACTIVATIONS = {"leaky_relu": leaky_relu, "tanh": tanh, "identity": identity,
               "softplus": softplus, "sigmoid": sigmoid}


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axis = (axis,) if np.isscalar(axis) else tuple(axis)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)
    return _node(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axes, keepdims) * (1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    s = np.exp(a.value - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = np.log(tot) + m
    soft = s / tot

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)
    return _node(out if keepdims else np.squeeze(out, axis), (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _node(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def moveaxis(a, src, dst):
    a = as_tensor(a)
    return _node(np.moveaxis(a.value, src, dst), (a,), lambda g: (np.moveaxis(g, dst, src),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _node(np.broadcast_to(a.value, shape), (a,), lambda g: (g,))


def getitem(a, idx):
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)
    return _node(a.value[idx], (a,), vjp)


def concat(items, axis=0):
    items = [as_tensor(t) for t in items]
    sizes = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _node(np.concatenate([t.value for t in items], axis=axis), items,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(items, axis=0):
    items = [as_tensor(t) for t in items]
    return _node(np.stack([t.value for t in items], axis=axis), items,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def _einsum_grad(spec_out, g, others, spec_in, target_shape):
    # letters present only in the target operand are broadcast back
    values, specs = others
    have = set(spec_out).union(*specs)
    kept = "".join(c for c in spec_in if c in have)
    subs = ",".join([spec_out] + list(specs))
    r = np.einsum(f"{subs}->{kept}", g, *values, optimize=True)
    if kept != spec_in:
        r = r.reshape([target_shape[i] if c in have else 1 for i, c in enumerate(spec_in)])
        r = np.broadcast_to(r, target_shape)
    return r


def einsum(spec: str, *operands):
    """``np.einsum`` with explicit output subscripts and no ellipsis."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_spec = spec.replace(" ", "").split("->")
    in_specs = lhs.split(",")
    if len(in_specs) != len(ops) or "." in spec:
        raise ValueError(f"unsupported einsum spec {spec!r}")
    for s in in_specs:
        if len(set(s)) != len(s):
            raise ValueError("repeated subscripts within an operand are not supported")
    value = np.einsum(spec, *[o.value for o in ops], optimize=True)

    def vjp(g):
        grads = []
        for i, o in enumerate(ops):
            rest = [ops[j].value for j in range(len(ops)) if j != i]
            rest_specs = [in_specs[j] for j in range(len(ops)) if j != i]
            grads.append(_einsum_grad(out_spec, g, (rest, rest_specs), in_specs[i], o.shape))
        return tuple(grads)
    return _node(value, ops, vjp)


def structured_apply(blocks: Tensor, z: Tensor, structure: pw.PermStructure):
    """Differentiable :func:`perm_weights.apply`; ``blocks`` has :func:`perm_weights.block_shape`."""
    blocks, z = as_tensor(blocks), as_tensor(z)
    w = pw.StructuredWeight.from_blocks(structure, blocks.value)
    out = pw.apply(w, z.value)

    def vjp(g):
        return pw.block_gradient(w, z.value, g), pw.apply_transpose(w, g)
    return _node(out, (blocks, z), vjp)


def masked_sum(mask: Tensor, x: Tensor):
    """Differentiable :func:`kernels.masked_sum` in the ``[B, C, P, D, Q]`` layout."""
    mask, x = as_tensor(mask), as_tensor(x)
    out = kernels.masked_sum(mask.value, x.value)

    def vjp(g):
        g = np.ascontiguousarray(g)
        mt = np.ascontiguousarray(mask.value.transpose(0, 1, 4, 3, 2))
        return kernels.masked_outer(g, x.value), kernels.masked_sum(mt, g)
    return _node(out, (mask, x), vjp)


def channel_gains(h: np.ndarray, w_re, w_im):
    """Coherent gains ``G[b, k, i] = sum_{m, n} conj(h[b, m, k, n]) w[b, m, i, n]``.

    ``h`` is a complex constant, ``w = w_re + j w_im``.  Returns a Tensor
    ``[2, B, K, I]`` holding the real and imaginary parts.
    """
    w_re, w_im = as_tensor(w_re), as_tensor(w_im)
    B, M, K, N = h.shape
    I = w_re.shape[2]
    hc = np.conj(h).transpose(0, 2, 1, 3).reshape(B, K, M * N)
    w = (w_re.value + 1j * w_im.value).transpose(0, 1, 3, 2).reshape(B, M * N, I)
    G = hc @ w

    def vjp(g):
        gc = g[0] + 1j * g[1]                                  # [B, K, I]
        d = (np.swapaxes(hc.conj(), 1, 2) @ gc).reshape(B, M, N, I).transpose(0, 1, 3, 2)
        return d.real, d.imag
    return _node(np.stack([G.real, G.imag]), (w_re, w_im), vjp)


def letters(n: int, skip: str = "") -> str:
    pool = [c for c in string.ascii_lowercase if c not in skip]
    return "".join(pool[:n])

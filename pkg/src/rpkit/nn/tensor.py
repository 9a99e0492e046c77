"""Reverse-mode autodiff over numpy arrays.

Only the operations the models need are provided. Each op computes its forward
value eagerly and records a closure returning the gradients of its inputs.
Leaves with ``requires_grad`` accumulate into ``.grad``; interior gradients are
dropped after use.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from rpkit import kernels

_STATE = {"grad": True, "checked": False}


class NonFinite(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


def set_checked(flag):
    """Toggle NaN/Inf guards on every op output. Returns the previous value."""
    prev = _STATE["checked"]
    _STATE["checked"] = bool(flag)
    return prev


def is_checked():
    return _STATE["checked"]


@contextlib.contextmanager
def no_grad():
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg

    # operators
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    if _STATE["checked"] and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFinite("non-finite value produced")
    out = Tensor(data)
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _flush(a):
    """Zero out subnormal entries in place; BLAS slows down badly on them."""
    if a.dtype.kind == "f":
        a[np.abs(a) < np.finfo(a.dtype).tiny] = 0
    return a


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    return a, b


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _node(ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {ad.shape} @ {bd.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(np.matmul(ad, bd), (a, b), back)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeMismatch(f"linear: input {xd.shape} vs weight {wd.shape}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    y = x2 @ wd
    if b is not None:
        y = y + b.data
    y = y.reshape(*lead, wd.shape[1])

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, back)


def reshape(x, shape):
    s = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(s),))


def transpose(x, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_advanced(idx):
    idx = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def getitem(x, idx):
    if isinstance(idx, Tensor):
        idx = idx.data
    shape, dtype = x.shape, x.dtype
    adv = _is_advanced(idx)

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        if adv:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _node(x.data[idx], (x,), back)


def concat(xs, axis=0):
    datas = [x.data for x in xs]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _node(np.concatenate(datas, axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def exp(x):
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x):
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x):
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _node(y, (x,), lambda g: (g * y * (1 - y),))


def relu(x):
    m = x.data > 0
    return _node(x.data * m, (x,), lambda g: (g * m,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(u)
    y = 0.5 * xd * (1 + t)

    def back(g):
        du = _GELU_C * (1 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * du),)

    return _node(y, (x,), back)


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x.data))
    xd = x.data
    return _node(xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),))


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: feature dim {d} vs gamma {gamma.shape}")
    shape = x.shape
    y, xhat, rstd = kernels.layer_norm_fwd(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def back(g):
        gx, gg, gb = kernels.layer_norm_bwd(g.reshape(-1, d), xhat, rstd, gamma.data)
        return gx.reshape(shape), gg.astype(gamma.dtype, copy=False), gb.astype(beta.dtype, copy=False)

    return _node(y.reshape(shape), (x, gamma, beta), back)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = _flush(e / e.sum(axis=axis, keepdims=True))
    return _node(y, (x,), lambda g: (_flush(y * (g - (g * y).sum(axis=axis, keepdims=True))),))


def embedding(weight, idx):
    """Rows of ``weight`` selected by integer array ``idx`` (any shape)."""
    idx = np.asarray(idx)
    n, d = weight.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeMismatch(f"embedding index out of range [0, {n})")

    def back(g):
        return (kernels.scatter_add_rows(n, idx.ravel(), g.reshape(-1, d)),)

    return _node(weight.data[idx], (weight,), back)


def segment_sum(x, owner, n_rows):
    """Sum rows of (P, d) ``x`` into ``n_rows`` buckets given by ``owner``."""
    owner = np.asarray(owner)
    xd = x.data
    out = kernels.scatter_add_rows(n_rows, owner, xd.reshape(len(owner), -1))
    return _node(out, (x,), lambda g: (g[owner].reshape(xd.shape),))


def cross_entropy(logits, targets, weights=None):
    """Summed (optionally weighted) categorical cross-entropy.

    ``logits`` is (N, C), ``targets`` (N,) class indices.
    """
    ld = logits.data
    if ld.ndim != 2 or np.shape(targets) != (ld.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {ld.shape} vs targets {np.shape(targets)}")
    targets = np.asarray(targets)
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(targets)), targets]
    w = None if weights is None else np.asarray(weights, dtype=ld.dtype)
    loss = (nll * w).sum() if w is not None else nll.sum()

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(targets)), targets] -= 1
        if w is not None:
            p *= w[:, None]
        return (_flush(p * g),)

    return _node(np.asarray(loss, dtype=ld.dtype), (logits,), back)


def grouped_cross_entropy(logits, bounds, targets, weights=None):
    """Sum of cross-entropies over column groups of one logits matrix.

    ``bounds`` is a list of ``(start, end)`` column ranges, one per head;
    ``targets`` is (N, G) with the target column (absolute) of each head.
    Rows are weighted by ``weights`` (N,) if given. Returns the scalar sum.
    """
    ld = logits.data
    targets = np.asarray(targets)
    n = ld.shape[0]
    rows = np.arange(n)
    w = np.ones(n, dtype=ld.dtype) if weights is None else np.asarray(weights, dtype=ld.dtype)
    total = 0.0
    probs = []
    for g, (a, b) in enumerate(bounds):
        z = ld[:, a:b] - ld[:, a:b].max(axis=1, keepdims=True)
        e = np.exp(z)
        se = e.sum(axis=1)
        nll = np.log(se) - z[rows, targets[:, g] - a]
        total += float((nll * w).sum())
        probs.append(e / se[:, None])

    def back(gr):
        out = np.zeros_like(ld)
        for g, (a, b) in enumerate(bounds):
            p = probs[g]
            p[rows, targets[:, g] - a] -= 1
            out[:, a:b] = p * (w[:, None] * gr)
        return (_flush(out),)

    return _node(np.asarray(total, dtype=ld.dtype), (logits,), back)


def square(x):
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2 * g * xd,))


def gaussian_sample(mu, logvar, noise):
    """Reparameterised ``mu + exp(logvar / 2) * noise``."""
    return add(mu, mul(exp(mul(logvar, 0.5)), as_tensor(noise, mu)))


def kl_standard_normal(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    return mul(sum_(square(mu) + exp(logvar) - 1.0 - logvar, axis=-1), 0.5)

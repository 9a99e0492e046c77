"""Parameter containers and the layers the models are built from."""
from __future__ import annotations

import math

import numpy as np

from rpkit.nn import tensor as T
from rpkit.nn.tensor import Tensor

DEFAULT_DTYPE = np.float32


def param(data):
    return Tensor(np.ascontiguousarray(data), requires_grad=True)


class Module:
    def named_parameters(self, prefix=""):
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
            elif isinstance(v, Module):
                yield from v.named_parameters(f"{prefix}{name}.")
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise T.ShapeMismatch(f"{k}: checkpoint {arr.shape} vs model {p.shape}")
                p.data = arr.astype(p.dtype).copy()

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, dtype=DEFAULT_DTYPE, zero=False):
        if zero:
            w = np.zeros((n_in, n_out), dtype)
        else:
            lim = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-lim, lim, size=(n_in, n_out)).astype(dtype)
        self.weight = param(w)
        self.bias = param(np.zeros(n_out, dtype)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, dtype=DEFAULT_DTYPE, eps=1e-5):
        self.gamma = param(np.ones(d, dtype))
        self.beta = param(np.zeros(d, dtype))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n, d, rng, dtype=DEFAULT_DTYPE, std=0.02, zero=False):
        w = np.zeros((n, d), dtype) if zero else (rng.standard_normal((n, d)) * std).astype(dtype)
        self.weight = param(w)

    def __call__(self, idx):
        return T.embedding(self.weight, idx)


class MLP(Module):
    """Stack of Linear layers with GELU between them (none after the last)."""

    def __init__(self, sizes, rng, dtype=DEFAULT_DTYPE):
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


def causal_mask(n, dtype=DEFAULT_DTYPE):
    """Additive (1, 1, n, n) mask blocking attention to later positions."""
    m = np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)
    return m[None, None]


def key_padding_mask(valid, dtype=DEFAULT_DTYPE):
    """Additive (B, 1, 1, S) mask from a boolean (B, S) validity array."""
    return np.where(valid, 0.0, -1e9).astype(dtype)[:, None, None, :]


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng, dtype=DEFAULT_DTYPE):
        if d % heads:
            raise ValueError(f"hidden size {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng, dtype=dtype)
        self.k = Linear(d, d, rng, dtype=dtype)
        self.v = Linear(d, d, rng, dtype=dtype)
        self.o = Linear(d, d, rng, dtype=dtype)

    def _split(self, x):
        b, s, d = x.shape
        return x.reshape(b, s, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x, ctx=None, mask=None):
        ctx = x if ctx is None else ctx
        b, s, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // self.heads))
        if mask is not None:
            scores = scores + T.Tensor(mask.astype(scores.dtype, copy=False))
        att = T.softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
        return self.o(out)


class TransformerBlock(Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, d, heads, rng, cross=False, ff_mult=4, dtype=DEFAULT_DTYPE):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype)
        if cross:
            self.ln_x = LayerNorm(d, dtype)
            self.xattn = MultiHeadAttention(d, heads, rng, dtype)
        else:
            self.ln_x = self.xattn = None
        self.ln2 = LayerNorm(d, dtype)
        self.ff = MLP([d, ff_mult * d, d], rng, dtype)

    def __call__(self, x, mask=None, mem=None, mem_mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        if self.xattn is not None:
            x = x + self.xattn(self.ln_x(x), ctx=mem, mask=mem_mask)
        return x + self.ff(self.ln2(x))

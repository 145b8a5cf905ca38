"""Parameterised layers built on the autograd kernel."""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def parameter(data):
    return Tensor(data, requires_grad=True)


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container whose Tensor attributes (and sub-modules) are its parameters."""

    training = True

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def load_state(self, state, strict=True):
        params = self.named_parameters()
        for name, p in params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing tensor {name!r}")
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: checkpoint {value.shape} vs model {p.shape}")
            p.data = value.astype(p.dtype).copy()
        if strict:
            extra = sorted(set(state) - set(params))
            if extra:
                raise KeyError(f"unexpected tensor {extra[0]!r}")

    def state(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, cin, cout, rng, zero=False):
        w = np.zeros((cin, cout)) if zero else kaiming_uniform(rng, (cin, cout), cin)
        self.W = parameter(w)
        self.b = parameter(np.zeros(cout))

    def forward(self, x):
        return ag.dense(x, self.W, self.b)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, dilation=1, padding_mode="zeros", zero=False):
        shape = (cout, cin, k, k)
        self.k = parameter(np.zeros(shape) if zero else kaiming_uniform(rng, shape, cin * k * k))
        self.b = parameter(np.zeros(cout))
        self.dilation = dilation
        self.padding_mode = padding_mode

    def forward(self, x):
        return ag.conv2d(x, self.k, self.b, dilation=self.dilation, padding_mode=self.padding_mode)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / ag.sqrt(var + self.eps) * self.gamma + self.beta


class MultiheadAttention(Module):
    """Scaled dot-product self-attention over the token axis (-2)."""

    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"embedding width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, t):
        *lead, V, C = t.shape
        h = self.heads
        t = t.reshape(tuple(lead) + (V, h, C // h))
        n = len(lead)
        return ag.transpose(t, tuple(range(n)) + (n + 1, n, n + 2))

    def forward(self, x, key_mask=None):
        """x: [..., V, C]; key_mask: optional bool [..., V], False tokens receive no attention."""
        *lead, V, C = x.shape
        n = len(lead)
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ag.matmul(q, ag.transpose(k, tuple(range(n + 1)) + (n + 2, n + 1)))
        scores = scores * (1.0 / math.sqrt(C // self.heads))
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask), 0.0, -1e9).astype(x.dtype)
            scores = scores + bias[..., None, None, :]
        attn = ag.softmax(scores, axis=-1)
        out = ag.matmul(attn, v)
        out = ag.transpose(out, tuple(range(n)) + (n + 1, n, n + 2)).reshape(tuple(lead) + (V, C))
        return self.o(out)


def multihead_attention(x, heads, params):
    """Functional form: ``params`` is a MultiheadAttention holding the projections."""
    if x.shape[-1] % heads:
        raise ValueError(f"embedding width {x.shape[-1]} is not divisible by {heads} heads")
    if params.heads != heads:
        raise ValueError("head count does not match the parameter set")
    return params(x)


class TransformerEncoderLayer(Module):
    def __init__(self, dim, heads, ff, rng):
        self.attn = MultiheadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff, rng)
        self.ff2 = Linear(ff, dim, rng)
        self.norm2 = LayerNorm(dim)

    def forward(self, x, key_mask=None):
        x = self.norm1(x + self.attn(x, key_mask))
        return self.norm2(x + self.ff2(ag.leaky_relu(self.ff1(x))))


class SkipMLP(Module):
    """Two groups of dense layers; the input is re-concatenated before the second group.

    The final layer maps to one logit followed by a sigmoid.
    """

    def __init__(self, cin, reduce_widths, query_widths, rng):
        self.reduce = []
        w = cin
        for width in reduce_widths:
            self.reduce.append(Linear(w, width, rng))
            w = width
        self.query = []
        w = w + cin
        for width in query_widths:
            self.query.append(Linear(w, width, rng))
            w = width
        self.head = Linear(w, 1, rng)

    def logits(self, x):
        h = x
        for layer in self.reduce:
            h = ag.leaky_relu(layer(h))
        h = ag.concat([h, x], axis=-1)
        for layer in self.query:
            h = ag.leaky_relu(layer(h))
        return self.head(h)[..., 0]

    def forward(self, x):
        return ag.sigmoid(self.logits(x))

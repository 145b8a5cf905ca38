"""Dense tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure that pushes the output gradient
back to them.  ``Tensor.backward`` walks the recorded graph in exact reverse
topological order and then releases it, so a second call without a fresh
forward pass raises.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
import scipy.sparse as sp

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors (gradient checks use float64)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class NonFiniteError(ValueError):
    """A forward op met NaN input."""


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or default_dtype())
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- graph traversal --------------------------------------------------
    def backward(self, grad=None):
        if self._consumed:
            raise GraphError("backward called twice on the same graph; re-run the forward pass")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward without an explicit gradient requires a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not (parent.requires_grad or parent._backward is not None):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _needs_graph(*tensors):
    return _grad_enabled() and any(t.requires_grad or t._backward is not None for t in tensors)


def _make(data, parents, backward):
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if _needs_graph(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# -- elementwise ---------------------------------------------------------
def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def power(a, p):
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = as_tensor(a)
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,))


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; the gradient is zero where the bound is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,))


def where(cond, a, b):
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(np.where(cond, g, 0), sa),
                                         _unbroadcast(np.where(cond, 0, g), sb)))


def smooth_l1(a, beta):
    """Huber-style loss, quadratic below ``beta`` and linear above."""
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    small = ax < beta
    out = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta).astype(x.dtype)
    dx = np.where(small, x / beta, np.sign(x)).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * dx,))


# -- reductions and shape ------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def tmax(a, axis, keepdims=False):
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)
    shape = a.shape

    def backward(g):
        gx = np.zeros(shape, dtype=a.dtype)
        if not keepdims:
            g = np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis)
        return (gx,)

    return _make(out, (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)

    def backward(g):
        gx = np.zeros(shape, dtype=a.dtype)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.asarray(a.data[idx]), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tensors,
                 lambda g: tuple(np.squeeze(s, axis) for s in np.split(g, n, axis=axis)))


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


# -- linear algebra ------------------------------------------------------
ROW_BLOCK = 256


def _rowstable_matmul(ad, bd):
    """``ad @ bd`` for a 2-D ``bd`` whose rows do not depend on how many rows go in together.

    BLAS picks kernels and blocking from the problem shape, so the same row can round
    differently in different batches. Multiplying in zero-padded blocks of a fixed row
    count (and at least two columns) gives every call the same shape.
    """
    k, m = bd.shape
    rows = ad.reshape(-1, k)
    n = len(rows)
    pad = (-n) % ROW_BLOCK
    if pad:
        rows = np.concatenate([rows, np.zeros((pad, k), dtype=rows.dtype)])
    if m == 1:
        bd = np.concatenate([bd, np.zeros_like(bd)], axis=1)
    out = np.concatenate([rows[i:i + ROW_BLOCK] @ bd for i in range(0, len(rows), ROW_BLOCK)])
    return out[:n, :m].reshape(ad.shape[:-1] + (m,))


def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    if bd.ndim == 2 and ad.ndim >= 1 and ad.shape[-1] == bd.shape[0] and ad.size:
        out = _rowstable_matmul(ad, bd)
    else:
        out = ad @ bd
    return _make(out, (a, b), backward)


def dense(x, W, b=None):
    """Affine map ``y = x W + b`` for x of shape [..., Cin]."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"dense: dimension mismatch between x{tuple(x.shape)} and W{tuple(W.shape)}")
    y = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ValueError(f"dense: bias shape {tuple(b.shape)} does not match W{tuple(W.shape)}")
        y = add(y, b)
    return y


def softmax(a, axis=-1):
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NonFiniteError("softmax: NaN in input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)
        return (out * (g - dot),)

    return _make(out, (a,), backward)


def softmax_rows(x):
    """Row-wise softmax of a 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    return softmax(x, axis=1)


def sparse_apply(S, x):
    """``S @ x`` for a constant scipy sparse matrix S and a 2-D tensor x."""
    x = as_tensor(x)
    S = sp.csr_matrix(S)
    St = S.T.tocsr()
    out = np.asarray(S @ x.data, dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.asarray(St @ g, dtype=x.dtype),))


# -- image ops -----------------------------------------------------------
def pad2d(x, p, mode="zeros"):
    """Pad the last two axes by ``p`` on each side (zeros or edge replication)."""
    x = as_tensor(x)
    if p == 0:
        return x
    H, W = x.shape[-2:]
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    if mode == "zeros":
        out = np.pad(x.data, width)
        return _make(out, (x,), lambda g: (g[..., p:p + H, p:p + W],))
    if mode != "replicate":
        raise ValueError(f"unknown padding mode {mode!r}")
    out = np.pad(x.data, width, mode="edge")
    ih = np.clip(np.arange(-p, H + p), 0, H - 1)
    iw = np.clip(np.arange(-p, W + p), 0, W - 1)

    def backward(g):
        gh = np.zeros(g.shape[:-2] + (H, g.shape[-1]), dtype=g.dtype)
        np.add.at(gh, (Ellipsis, ih, slice(None)), g)
        gx = np.zeros(g.shape[:-2] + (H, W), dtype=g.dtype)
        np.add.at(gx, (Ellipsis, iw), gh)
        return (gx,)

    return _make(out, (x,), backward)


def conv2d(x, k, b=None, dilation=1, padding_mode="zeros"):
    """Same-size 2-D convolution (cross-correlation) of x [.., C, H, W] with k [Cout, C, kh, kw]."""
    x, k = as_tensor(x), as_tensor(k)
    Cout, Cin, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if dilation < 1:
        raise ValueError("conv2d: dilation must be >= 1")
    if x.shape[-3] != Cin:
        raise ValueError(f"conv2d: input channels {x.shape[-3]} do not match kernel {tuple(k.shape)}")
    if kh != kw:
        raise ValueError("conv2d: only square kernels are supported")
    p = dilation * (kh // 2)
    xp = pad2d(x, p, padding_mode)
    y = _conv_valid(xp, k, dilation, x.shape[-2], x.shape[-1])
    if b is not None:
        y = add(y, reshape(as_tensor(b), (Cout, 1, 1)))
    return y


def _conv_valid(xp, k, d, H, W):
    # im2col: one [Cout, Cin*kh*kw] x [Cin*kh*kw, H*W] product per leading index
    xd, kd = xp.data, k.data
    Cout, Cin, kh, kw = kd.shape
    lead = xd.shape[:-3]
    offsets = [(i * d, j * d) for i in range(kh) for j in range(kw)]
    cols = np.stack([xd[..., :, a:a + H, b:b + W] for a, b in offsets], axis=-3)
    cols = cols.reshape(lead + (Cin * kh * kw, H * W))
    K = kd.reshape(Cout, Cin * kh * kw)
    out = (K @ cols).reshape(lead + (Cout, H, W))

    def backward(g):
        gf = g.reshape(lead + (Cout, H * W))
        gK = gf @ np.swapaxes(cols, -1, -2)
        if lead:
            gK = gK.reshape((-1, Cout, Cin * kh * kw)).sum(axis=0)
        gcols = (K.T @ gf).reshape(lead + (Cin, kh * kw, H, W))
        gx = np.zeros_like(xd)
        for n, (a, b) in enumerate(offsets):
            gx[..., :, a:a + H, b:b + W] += gcols[..., n, :, :]
        return gx, gK.reshape(kd.shape).astype(kd.dtype)

    return _make(out, (xp, k), backward)


def avg_pool2(x):
    """2x2 average pooling with stride 2 on the last two axes."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2 needs even extents, got {H}x{W}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (H // 2, 2, W // 2, 2)).mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        return (g.astype(x.dtype),)

    return _make(out.astype(x.dtype), (x,), backward)


def _upsample_matrix(n, dtype):
    # pixel-center convention: output i samples input at (i + 0.5) / 2 - 0.5
    m = 2 * n
    pos = np.clip((np.arange(m) + 0.5) / 2.0 - 0.5, 0, n - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    t = pos - i0
    U = np.zeros((m, n), dtype=dtype)
    np.add.at(U, (np.arange(m), i0), 1 - t)
    np.add.at(U, (np.arange(m), i1), t)
    return U


def upsample2(x):
    """Bilinear 2x upsampling of the last two axes."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    Uh = Tensor(_upsample_matrix(H, x.dtype), dtype=x.dtype)
    UwT = Tensor(_upsample_matrix(W, x.dtype).T.copy(), dtype=x.dtype)
    return matmul(matmul(Uh, x), UwT)


def global_avg_pool(x):
    """Mean over the spatial axes, keeping them as singleton dims."""
    return mean(x, axis=(-2, -1), keepdims=True)

"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor, precision


def numerical_grad(fn, arrays, i, h=1e-3):
    """d fn / d arrays[i] by central differences; ``fn`` maps arrays -> float."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[i]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        fp = fn(base)
        flat[j] = old - h
        fm = fn(base)
        flat[j] = old
        gflat[j] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, arrays, wrt=None, h=1e-3):
    """Compare reverse-mode and finite-difference gradients of a scalar function.

    ``fn`` takes a list of Tensors and returns a scalar Tensor.  Evaluation runs in
    float64 so the comparison measures the backward formulas, not float32 rounding.
    Returns the worst relative error over the inputs in ``wrt`` (default: all).
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    worst = 0.0
    with precision(np.float64):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(tensors)
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in tensors]

        def scalar(arrs):
            return float(fn([Tensor(a) for a in arrs]).data.reshape(-1)[0])

        for i in wrt:
            num = numerical_grad(scalar, arrays, i, h)
            worst = max(worst, relative_error(analytic[i], num))
    return worst

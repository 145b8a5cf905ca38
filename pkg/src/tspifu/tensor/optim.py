"""First-order optimizers operating in place on parameter tensors."""
from __future__ import annotations

import numpy as np


def _check(params, grads):
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if g is not None and np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")


def sgd_step(params, grads, lr):
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    _check(params, grads)
    for p, g in zip(params, grads):
        if g is not None:
            p.data = (p.data - lr * g).astype(p.dtype)


class Adam:
    """Adam with bias correction; state is keyed by parameter name so it can be checkpointed."""

    def __init__(self, named_params, lr=1e-4, betas=(0.5, 0.99), eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads=None):
        """Apply one update using ``grads`` (name -> array) or each parameter's ``.grad``."""
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            m = self.m[name] = (b1 * self.m[name] + (1 - b1) * g).astype(p.dtype)
            v = self.v[name] = (b2 * self.v[name] + (1 - b2) * g * g).astype(p.dtype)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def state(self):
        out = {"adam.t": np.array([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, state):
        self.t = int(state["adam.t"][0])
        for k, p in self.params.items():
            self.m[k] = np.asarray(state[f"adam.m.{k}"], dtype=p.dtype).copy()
            self.v[k] = np.asarray(state[f"adam.v.{k}"], dtype=p.dtype).copy()


def adam_step(params, grads, lr, betas=(0.5, 0.99), state=None, eps=1e-8):
    """Functional Adam step over parallel lists; returns the (mutated) state dict."""
    _check(params, grads)
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p.data) for p in params],
                 "v": [np.zeros_like(p.data) for p in params]}
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state["t"] += 1
    b1, b2 = betas
    t = state["t"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        state["m"][i] = b1 * state["m"][i] + (1 - b1) * g
        state["v"][i] = b2 * state["v"][i] + (1 - b2) * g * g
        mhat = state["m"][i] / (1 - b1 ** t)
        vhat = state["v"][i] / (1 - b2 ** t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return state

"""Training objectives: extended BCE on occupancy, the normal-consistency regulariser
on depth-jump points, the multi-scale depth/normal loss, and their weighted sum."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .features import SCALES, depth_pyramid
from .tensor import autograd as ag
from .tensor.autograd import Tensor, as_tensor

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass
class LossWeights:
    mu0: float = 1.0
    mu1: float = 1.0
    lambda_reg: float = 100.0
    lambda_d: float = 10.0
    rho_d: float = 10.0
    rho_n: float = 1.0
    lambda_s: tuple = (1.0, 0.75, 0.5, 0.25)
    epsilon: float = 0.004
    smooth_l1_beta: float = 0.01
    normal_h: float = 0.002

    def __post_init__(self):
        self.lambda_s = tuple(float(v) for v in self.lambda_s)
        if len(self.lambda_s) != SCALES:
            raise ValueError(f"lambda_s needs {SCALES} entries")
        vals = [self.mu0, self.mu1, self.lambda_reg, self.lambda_d, self.rho_d, self.rho_n, self.epsilon,
                *self.lambda_s]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")

    def to_json(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# occupancy
# ---------------------------------------------------------------------------
def _check_labels(labels):
    labels = np.asarray(labels)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("occupancy labels must be 0 or 1")
    return labels.astype(np.float64)


def bce(pred, labels, reduction="sum"):
    pred = as_tensor(pred)
    y = _check_labels(labels).astype(pred.dtype)
    p = ag.clamp(pred, BCE_EPS, 1 - BCE_EPS)
    per = -(ag.log(p) * y + ag.log(1 - p) * (1 - y))
    return ag.mean(per) if reduction == "mean" else ag.tsum(per)


def loss_sigma(pred_b, labels_b, pred_f=None, labels_f=None, mu0=1.0, mu1=1.0, reduction="sum"):
    """mu0 * BCE(sigma_b on S_0) + mu1 * BCE(sigma_f on S_1); ``reduction`` is 'sum' or 'mean'."""
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    total = bce(pred_b, labels_b, reduction) * mu0
    if pred_f is not None and len(np.asarray(labels_f)):
        total = total + bce(pred_f, labels_f, reduction) * mu1
    return total


# ---------------------------------------------------------------------------
# normal consistency on S_j
# ---------------------------------------------------------------------------
def perturbations(n, eps, rng, samples_per_point=1, sphere=False):
    """Offsets delta for L_reg: uniform per axis in [-eps, eps], or uniform in the eps-ball."""
    if sphere:
        d = rng.normal(size=(n * samples_per_point, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * eps * rng.random((n * samples_per_point, 1)) ** (1 / 3)
    return rng.uniform(-eps, eps, size=(n * samples_per_point, 3))


def fd_normals(field_fn, X, h):
    """Finite-difference gradient directions of a (possibly differentiable) field.

    ``field_fn`` maps [M, 3] points to a Tensor or array of M occupancies. Returns
    (n Tensor [N, 3], ok bool [N]).
    """
    N = len(X)
    offs = np.concatenate([np.eye(3) * h, -np.eye(3) * h])
    Q = (X[None, :, :] + offs[:, None, :]).reshape(6 * N, 3)
    out = field_fn(Q)
    if not isinstance(out, Tensor):
        # fixed field: difference in float64 and round only the unit normal, so that
        # fields with a constant gradient give bit-identical normals everywhere
        s = np.asarray(out, dtype=np.float64).reshape(6, N)
        g = (s[0:3] - s[3:6]).T / (2 * h)
        norm = np.linalg.norm(g, axis=1)
        ok = norm > 1e-8
        return Tensor(np.where(ok[:, None], g / np.where(ok, norm, 1)[:, None], 0.0)), ok
    s = out.reshape(6, N)
    g = ag.transpose(s[0:3] - s[3:6], (1, 0)) * (1.0 / (2 * h))
    norm2 = ag.tsum(g * g, axis=1, keepdims=True)
    ok = np.sqrt(norm2.data[:, 0].astype(np.float64)) > 1e-8
    safe = ag.where(ok[:, None], norm2, Tensor(np.ones((N, 1)), dtype=norm2.dtype))
    return g / ag.sqrt(safe), ok


def loss_reg(field_fn, points, eps=0.004, rng=None, samples_per_point=1, h=0.002, sphere=False,
             reduction="sum"):
    """Sum over S_j of ||n(X) - n(X + delta)||^2 with finite-difference normals.

    Returns (loss, n_degenerate); points where either normal is degenerate are skipped.
    ``reduction="mean"`` divides by the number of non-degenerate pairs.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    X = np.repeat(np.asarray(points, dtype=np.float64).reshape(-1, 3), samples_per_point, axis=0)
    if len(X) == 0:
        return Tensor(0.0), 0
    Xd = X + perturbations(len(X) // samples_per_point, eps, rng, samples_per_point, sphere)
    n, ok = fd_normals(field_fn, np.concatenate([X, Xd]), h)
    M = len(X)
    good = ok[:M] & ok[M:]
    bad = int((~good).sum())
    if not good.any():
        log.warning("loss_reg: every point has a degenerate field gradient")
        return Tensor(0.0), bad
    diff = n[:M] - n[M:]
    per = ag.tsum(diff * diff, axis=1)
    total = ag.tsum(per * good.astype(per.dtype))
    return (total * (1.0 / int(good.sum())) if reduction == "mean" else total), bad


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------
def normals_tensor(depth, cameras):
    """Differentiable version of geometry.normals_from_depth for D [V, H, W].

    Returns a Tensor [V, H-2, W-2, 3] of unit normals at interior pixels.
    """
    V, H, W = depth.shape
    dt = depth.dtype
    cols = []
    for cam in cameras:
        uv = cam.pixel_grid()
        cols.append(np.stack([(uv[..., 0] - cam.cx) / cam.fx, (uv[..., 1] - cam.cy) / cam.fy], axis=0))
    ray = np.stack(cols).astype(dt)  # [V, 2, H, W]
    x = depth * ray[:, 0]
    y = depth * ray[:, 1]
    z = depth

    def du(t):
        return t[:, 1:-1, 2:] - t[:, 1:-1, :-2]

    def dv(t):
        return t[:, 2:, 1:-1] - t[:, :-2, 1:-1]

    tu = (du(x), du(y), du(z))
    tv = (dv(x), dv(y), dv(z))
    # cross(tv, tu)
    cx = tv[1] * tu[2] - tv[2] * tu[1]
    cy = tv[2] * tu[0] - tv[0] * tu[2]
    cz = tv[0] * tu[1] - tv[1] * tu[0]
    c = ag.stack([cx, cy, cz], axis=-1)
    norm2 = ag.tsum(c * c, axis=-1, keepdims=True)
    return c / ag.sqrt(norm2 + 1e-20)


def stencil_valid(valid):
    v = np.asarray(valid, dtype=bool)
    return v[:, 1:-1, 1:-1] & v[:, 1:-1, 2:] & v[:, 1:-1, :-2] & v[:, 2:, 1:-1] & v[:, :-2, 1:-1]


def gt_pyramid(gt_values, gt_valid):
    """Per-scale ground truth [V, H_s, W_s] by validity-aware 2x pooling."""
    per_view = [depth_pyramid(v, m) for v, m in zip(gt_values, gt_valid)]
    vals = [np.stack([pv[0][s] for pv in per_view]) for s in range(SCALES)]
    oks = [np.stack([pv[1][s] for pv in per_view]) for s in range(SCALES)]
    return vals, oks


def loss_depth(d_rf, gt_vals, gt_oks, masks, cameras, rho_d=10.0, rho_n=1.0, lambda_s=(1, 0.75, 0.5, 0.25),
               beta=0.01):
    """rho_D * sum_s lambda_s * SmoothL1(d_rf^s, d_gt^s) + rho_N * L2(n_rf, n_gt), each averaged
    over the pixels valid in both prediction mask and ground truth."""
    total = None
    for s in range(SCALES):
        ok = np.asarray(gt_oks[s], dtype=bool) & (np.asarray(masks[s]) > 0)
        cnt = int(ok.sum())
        if cnt == 0:
            log.warning("loss_depth: no valid pixels at scale %d", s)
            continue
        err = ag.smooth_l1(d_rf[s] - Tensor(gt_vals[s], dtype=d_rf[s].dtype), beta)
        term = ag.tsum(err * ok.astype(err.dtype)) * (rho_d * lambda_s[s] / cnt)
        total = term if total is None else total + term
    if rho_n > 0:
        ok = stencil_valid(np.asarray(gt_oks[0], dtype=bool) & (np.asarray(masks[0]) > 0))
        if ok.any():
            n_rf = normals_tensor(d_rf[0], cameras)
            with ag.no_grad():
                n_gt = normals_tensor(Tensor(gt_vals[0]), cameras).data
            diff = n_rf - Tensor(n_gt, dtype=n_rf.dtype)
            per = ag.tsum(diff * diff, axis=-1)
            term = ag.tsum(per * ok.astype(per.dtype)) * (rho_n / int(ok.sum()))
            total = term if total is None else total + term
    return Tensor(0.0) if total is None else total


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------
def total_loss(components, weights=None, phase=2):
    """L = L_sigma + lambda_reg * L_reg + lambda_D * L_D; L_reg is gated off in phase 1."""
    w = weights or LossWeights()
    for name, value in components.items():
        v = value.item() if isinstance(value, Tensor) else float(value)
        if math.isnan(v):
            raise ValueError(f"loss component {name!r} is NaN")
    zero = Tensor(0.0)
    sigma = as_tensor(components.get("sigma", zero))
    out = sigma
    if phase >= 2 and "reg" in components:
        out = out + as_tensor(components["reg"]) * w.lambda_reg
    if "depth" in components:
        out = out + as_tensor(components["depth"]) * w.lambda_d
    return out

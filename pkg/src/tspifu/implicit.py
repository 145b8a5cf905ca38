"""Occupancy fields: truncated PSDF features, the MLP-backed body and face fields,
analytic and grid adapters, and finite-difference field normals.

Every field exposes ``query(X) -> numpy array in [0, 1]`` for X of shape [N, 3].
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .features import (EncoderConfig, Encoder, FeatureNet, TopDown, ViewAggregator, prepare_views,
                       sample_views, sampling_matrix, scale_uv)
from .geometry import DepthMap, bilinear_sample
from .tensor import autograd as ag
from .tensor.autograd import Tensor, no_grad
from .tensor.nn import Module, SkipMLP

DELTA_P = 0.01


# ---------------------------------------------------------------------------
# PSDF
# ---------------------------------------------------------------------------
@dataclass
class PsdfFeature:
    z: np.ndarray
    p: np.ndarray
    hole: np.ndarray
    valid: np.ndarray
    delta_p: float = DELTA_P


def psdf_feature(X, camera, depth, delta_p=DELTA_P):
    """Truncated projective signed distance of X against a depth raster.

    A depth hole yields p = -delta_p (in front of any surface, i.e. empty space) and
    sets ``hole``; a point behind the camera is marked invalid.
    """
    uv, z, valid = camera.project(np.asarray(X, dtype=np.float64).reshape(-1, 3))
    d, ok = bilinear_sample(depth, uv)
    p = np.where(ok, np.clip(z - d, -delta_p, delta_p), -delta_p)
    return PsdfFeature(z, p, ~ok, valid, delta_p)


def psdf_tensor(depth, mask, uv, z, delta_p):
    """Differentiable PSDF against D_rf [V, H, W] (Tensor) at uv [V, N, 2] -> (p Tensor [V, N], hole)."""
    import scipy.sparse as sp

    V, H, W = depth.shape
    mats, holes = [], []
    for v in range(V):
        S, ok = sampling_matrix(H, W, uv[v], mask[v] > 0)
        mats.append(S)
        holes.append(~ok)
    S = sp.block_diag(mats, format="csr")
    d = ag.sparse_apply(S, depth.reshape(V * H * W, 1)).reshape(V, -1)
    hole = np.stack(holes)
    diff = ag.clamp(Tensor(z, dtype=depth.dtype) - d, -delta_p, delta_p)
    return ag.where(hole, Tensor(np.full(hole.shape, -delta_p), dtype=depth.dtype), diff), hole


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------
def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


class AnalyticField:
    """sigma(X) = sigmoid(-k * sdf(X)); ``k=None`` gives the hard indicator sdf <= 0."""

    def __init__(self, sdf, k=None):
        self.sdf = sdf
        self.k = k

    def query(self, X):
        d = self.sdf(np.asarray(X, dtype=np.float64).reshape(-1, 3))
        if self.k is None:
            return (d <= 0).astype(np.float64)
        return sigmoid(-self.k * d)


class LinearField:
    """sigma(X) = clamp(a . X + b, 0, 1)."""

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = float(b)

    def query(self, X):
        return np.clip(np.asarray(X, dtype=np.float64).reshape(-1, 3) @ self.a + self.b, 0, 1)


class GridField:
    """Trilinear interpolation of an OccupancyGrid; zero outside its bounds."""

    def __init__(self, grid):
        self.grid = grid
        axes = grid.axes()
        self._interp = RegularGridInterpolator(axes, grid.values.astype(np.float64), bounds_error=False,
                                               fill_value=0.0)

    def query(self, X):
        return np.clip(self._interp(np.asarray(X, dtype=np.float64).reshape(-1, 3)), 0, 1)


def field_normal(field, X, h=0.002, outward=False):
    """Unit gradient direction of an occupancy field by central differences.

    Returns (n [N, 3], ok [N]); ok is False where the gradient norm is below 1e-8.
    ``outward=True`` flips to -grad, the outward surface normal of an occupancy field.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    g = np.empty_like(X)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (field.query(X + e) - field.query(X - e)) / (2 * h)
    norm = np.linalg.norm(g, axis=1)
    ok = norm > 1e-8
    n = np.where(ok[:, None], g / np.where(ok, norm, 1)[:, None], 0.0)
    return (-n if outward else n), ok


# ---------------------------------------------------------------------------
# body field
# ---------------------------------------------------------------------------
@dataclass
class BodyConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sample_scales: tuple = (0, 1, 2, 3)
    agg_dim: int = 256
    agg_heads: int = 8
    agg_layers: int = 6
    agg_ff: int = 512
    mlp_reduce: tuple = (1024, 512, 256)
    mlp_query: tuple = (128, 128, 128, 128)
    delta_p: float = DELTA_P
    z_ref: float = 1.8
    z_scale: float = 2.0

    @classmethod
    def toy(cls, **kw):
        base = dict(encoder=EncoderConfig.toy(), agg_dim=32, agg_heads=4, agg_layers=2, agg_ff=64,
                    mlp_reduce=(64, 32), mlp_query=(32, 32))
        base.update(kw)
        return cls(**base)

    def token_width(self):
        return sum(self.encoder.stack_channels[s] for s in self.sample_scales) + 2

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        for key in ("sample_scales", "mlp_reduce", "mlp_query"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(encoder=enc, **d)


class BodyModel(Module):
    """F_b: feature net, view aggregator and the body MLP."""

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.features = FeatureNet(cfg.encoder, rng)
        self.aggregator = ViewAggregator(cfg.token_width(), cfg.agg_dim, cfg.agg_heads, cfg.agg_layers,
                                         cfg.agg_ff, rng)
        self.mlp = SkipMLP(cfg.agg_dim, cfg.mlp_reduce, cfg.mlp_query, rng)

    def backbone(self):
        """Parameters frozen in the second training phase (everything before the aggregator)."""
        return {f"features.{k}": v for k, v in self.features.named_parameters().items()}

    def encode(self, prep):
        return self.features(prep)

    def tokens(self, out, cameras, X):
        """Per-view tokens [N, V, token_width] and view validity [N, V]."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        proj = [c.project(X) for c in cameras]
        uv = np.stack([p[0] for p in proj]).astype(np.float64)
        z = np.stack([p[1] for p in proj])
        valid = np.stack([p[2] for p in proj])
        parts = [sample_views(out.stack[s], scale_uv(uv, s)) for s in self.cfg.sample_scales]
        p, _ = psdf_tensor(out.depth[0], out.masks[0], uv, z, self.cfg.delta_p)
        znorm = Tensor((z - self.cfg.z_ref) / self.cfg.z_scale)
        feat = ag.concat(parts + [znorm.reshape(znorm.shape + (1,)),
                                  (p * (1.0 / self.cfg.delta_p)).reshape(p.shape + (1,))], axis=-1)
        return ag.transpose(feat, (1, 0, 2)), valid.T

    def logits(self, out, cameras, X):
        tok, valid = self.tokens(out, cameras, X)
        agg = self.aggregator(tok, valid)
        return self.mlp.logits(agg), valid.any(axis=1)

    def occupancy(self, out, cameras, X):
        """sigma_b as a Tensor [N]; points invalid in every view get exactly 0."""
        lg, any_valid = self.logits(out, cameras, X)
        return ag.where(any_valid, ag.sigmoid(lg), Tensor(np.zeros(len(any_valid)), dtype=lg.dtype))


def _threads():
    try:
        return max(1, int(os.environ.get("TSPIFU_THREADS", "1")))
    except ValueError:
        return 1


class BodyAssembly:
    """Inference-time F_b over a fixed capture: features are computed once and reused."""

    def __init__(self, model, views, chunk=4096):
        self.model = model
        self.cameras = [v.camera for v in views]
        self.prep = prepare_views(views, model.cfg.encoder)
        with no_grad():
            self.out = model.encode(self.prep)
        self.chunk = chunk

    def refined_depth(self, scale=0):
        return [DepthMap(d.astype(np.float32), m > 0)
                for d, m in zip(self.out.depth[scale].data, self.out.masks[scale])]

    def _query_chunk(self, X):
        with no_grad():
            return self.model.occupancy(self.out, self.cameras, X).data.astype(np.float64)

    def query(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        chunks = [X[i:i + self.chunk] for i in range(0, len(X), self.chunk)]
        if not chunks:
            return np.zeros(0)
        with ThreadPoolExecutor(_threads()) as ex:
            return np.concatenate(list(ex.map(self._query_chunk, chunks)))


# ---------------------------------------------------------------------------
# face field
# ---------------------------------------------------------------------------
@dataclass
class FaceConfig:
    channels: tuple = (16, 32, 64, 64)
    stack_channels: tuple = (16, 32, 32, 32)
    kernel: int = 3
    mlp_reduce: tuple = (512, 256)
    mlp_query: tuple = (128, 32)
    delta_p: float = DELTA_P
    z_ref: float = 1.8
    z_scale: float = 2.0
    depth_scale: float = 5.0

    @classmethod
    def toy(cls, **kw):
        base = dict(channels=(8, 16, 16, 16), stack_channels=(16, 16, 16, 16), mlp_reduce=(32, 32),
                    mlp_query=(32, 16))
        base.update(kw)
        return cls(**base)

    def to_json(self):
        return asdict(self)


class FaceModel(Module):
    """F_f: one conv encoder with a top-down stack over the upsampled face crop, then M_f."""

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        c = tuple(cfg.channels)
        self.encoder = Encoder(5, c, cfg.kernel, rng)
        self.topdown = TopDown(c[-1], c, tuple(cfg.stack_channels), cfg.kernel, rng)
        self.mlp = SkipMLP(cfg.stack_channels[0] + 2, cfg.mlp_reduce, cfg.mlp_query, rng)

    def encode(self, inputs):
        skips = self.encoder(Tensor(inputs))
        return self.topdown(skips[-1], skips)[0]

    def logits(self, psi, depth, mask, uv_up, z):
        feat = sample_views(psi, uv_up[None])[0]
        p, _ = psdf_tensor(Tensor(depth[None]), mask[None], uv_up[None], z[None], self.cfg.delta_p)
        znorm = Tensor(((z - self.cfg.z_ref) / self.cfg.z_scale)[:, None])
        x = ag.concat([feat, znorm, (p[0] * (1.0 / self.cfg.delta_p)).reshape(-1, 1)], axis=-1)
        return self.mlp.logits(x)


def face_inputs(rgb_up, depth_up, mask_up, cfg):
    """Network input [1, 5, H, W] from upsampled crop rasters: masked RGB, depth, mask."""
    m = np.asarray(mask_up, dtype=np.float64)
    d = (np.asarray(depth_up, dtype=np.float64) - cfg.z_ref) * cfg.depth_scale * m
    x = np.concatenate([np.transpose(rgb_up, (2, 0, 1)) * m, d[None], m[None]], axis=0)
    return x[None].astype(np.float32)


class FaceAssembly:
    """F_f bound to one frontal face crop.

    ``depth_up`` is the masked, upsampled refined face depth M_f(U(D_f_rf)).
    """

    def __init__(self, model, camera, transform, rgb_up, depth_up, mask_up, alpha=0.15):
        self.model = model
        self.camera = camera
        self.transform = transform
        self.mask_up = np.asarray(mask_up, dtype=bool)
        self.depth_up = np.where(self.mask_up, depth_up, 0.0).astype(np.float32)
        self.alpha = alpha
        self.inputs = face_inputs(rgb_up, self.depth_up, self.mask_up, model.cfg)
        with no_grad():
            self.psi = model.encode(self.inputs)

    def face_depth(self):
        return DepthMap(self.depth_up, self.mask_up)

    def flags(self, X):
        from .sampling import facial_flag

        return facial_flag(X, self.camera, self.face_depth(), self.transform, self.alpha)

    def query(self, X, v_f=None):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        v_f = self.flags(X) if v_f is None else np.asarray(v_f, dtype=bool)
        if not v_f.all():
            raise ValueError("face field queried at points whose facial flag is false")
        uv, z, _ = self.camera.project(X)
        with no_grad():
            lg = self.model.logits(self.psi, self.depth_up, self.mask_up, self.transform.to_up(uv), z)
        return sigmoid(lg.data)

"""The learned 2D feature path: dual RGB/depth encoders, the cross attention module,
the geometry aware module, the top-down feature stack, the residual depth decoder
and the cross-view transformer aggregator.

All image tensors carry a leading view axis, ``[V, C, H, W]``, so the three views
of a rig run through one graph.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import autograd as ag
from .tensor.autograd import Tensor
from .tensor.nn import Conv2d, Linear, Module, TransformerEncoderLayer

SCALES = 4


@dataclass
class EncoderConfig:
    channels: tuple = (16, 32, 64, 128)
    kernel: int = 3
    cam_channels: int = 16
    value_channels: int = 32
    cbam_reduction: int = 4
    gam_dilation: int = 2
    gam_local: int = 16
    gam_rgb: int = 16
    rgb_fraction: float = 0.5
    stack_channels: tuple = (16, 32, 32, 32)
    decoder_hidden: int = 16
    depth_ref: float = 1.8
    depth_scale: float = 5.0
    residual_scale: float = 0.01

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.stack_channels = tuple(int(c) for c in self.stack_channels)
        if len(self.channels) != SCALES or len(self.stack_channels) != SCALES:
            raise ValueError(f"encoder needs exactly {SCALES} scales")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @classmethod
    def toy(cls, **kw):
        base = dict(channels=(8, 16, 16, 32), cam_channels=8, value_channels=16, gam_local=8, gam_rgb=8,
                    stack_channels=(16, 16, 16, 16), decoder_hidden=8)
        base.update(kw)
        return cls(**base)

    def to_json(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
class Encoder(Module):
    """Four conv stages; stages 1-3 start with 2x2 average pooling (strides 1, 2, 4, 8)."""

    def __init__(self, cin, channels, k, rng):
        self.stages = []
        w = cin
        for c in channels:
            self.stages.append(Conv2d(w, c, k, rng))
            w = c

    def forward(self, x):
        skips = []
        h = x
        for s, conv in enumerate(self.stages):
            if s:
                h = ag.avg_pool2(h)
            h = ag.leaky_relu(conv(h))
            skips.append(h)
        return skips


def _flat(x):
    V, C, H, W = x.shape
    return x.reshape(V, C, H * W)


class CrossAttention(Module):
    """Non-local attention computed from the RGB branch and applied to both branches."""

    def __init__(self, c_rgb, c_depth, ck, cv, reduction, rng):
        self.theta = Conv2d(c_rgb, ck, 1, rng)
        self.phi = Conv2d(c_rgb, ck, 1, rng)
        self.g_r = Conv2d(c_rgb, cv, 1, rng)
        self.g_d = Conv2d(c_depth, cv, 1, rng)
        self.r_r = ResCBAM(cv, reduction, rng)
        self.r_d = ResCBAM(cv, reduction, rng)

    def attention(self, F_r):
        th = _flat(self.theta(F_r))
        ph = _flat(self.phi(F_r))
        scores = ag.matmul(ag.transpose(th, (0, 2, 1)), ph)
        return ag.softmax(scores, axis=-1)

    def forward(self, F_r, F_d):
        if F_r.shape[-2:] != F_d.shape[-2:]:
            raise ValueError(f"cam_fuse: spatial extents differ, {F_r.shape[-2:]} vs {F_d.shape[-2:]}")
        V, _, H, W = F_r.shape
        kappa = self.attention(F_r)
        kt = ag.transpose(kappa, (0, 2, 1))
        yr = ag.matmul(_flat(self.g_r(F_r)), kt).reshape(V, -1, H, W)
        yd = ag.matmul(_flat(self.g_d(F_d)), kt).reshape(V, -1, H, W)
        return ag.concat([self.r_r(yr), self.r_d(yd)], axis=1)


class ResCBAM(Module):
    """Channel attention then spatial attention, added back to the input."""

    def __init__(self, c, reduction, rng):
        hidden = max(c // reduction, 1)
        self.fc1 = Linear(c, hidden, rng)
        self.fc2 = Linear(hidden, c, rng)
        self.spatial = Conv2d(2, 1, 7, rng)

    def forward(self, x):
        gap = ag.global_avg_pool(x)[..., 0, 0]
        ca = ag.sigmoid(self.fc2(ag.leaky_relu(self.fc1(gap))))
        h = x * ca.reshape(ca.shape + (1, 1))
        desc = ag.concat([h.mean(axis=1, keepdims=True), ag.tmax(h, axis=1, keepdims=True)], axis=1)
        sa = ag.sigmoid(self.spatial(desc))
        return x + h * sa


class GeometryAware(Module):
    """Local-minus-context and local-minus-global contrast on the depth channels.

    The context conv replicates edge pixels, so a constant feature map yields
    exactly zero contrast.
    """

    def __init__(self, c_in, c_rgb_in, c_local, c_rgb, dilation, rng):
        if not 0 < c_rgb_in < c_in:
            raise ValueError("GAM channel split must leave both parts non-empty")
        self.c_rgb_in = c_rgb_in
        self.c_depth_in = c_in - c_rgb_in
        self.f_l = Conv2d(self.c_depth_in, c_local, 1, rng)
        self.f_g = Conv2d(self.c_depth_in, c_local, 3, rng, dilation=dilation, padding_mode="replicate")
        self.local_r = Conv2d(c_rgb_in, c_rgb, 1, rng)

    def split(self, Y):
        if Y.shape[1] != self.c_rgb_in + self.c_depth_in:
            raise ValueError(f"GAM expects {self.c_rgb_in + self.c_depth_in} channels, got {Y.shape[1]}")
        return Y[:, :self.c_rgb_in], Y[:, self.c_rgb_in:]

    def contrast(self, F_d):
        local = self.f_l(F_d)
        context = self.f_g(F_d)
        pooled = self.f_l(ag.global_avg_pool(F_d))
        return ag.concat([local - context, local - pooled], axis=1)

    def forward(self, Y):
        F_r, F_d = self.split(Y)
        return ag.concat([ag.leaky_relu(self.local_r(F_r)), self.contrast(F_d)], axis=1)


class TopDown(Module):
    """psi_3 = block(enriched, skip_3); psi_s = block(up(psi_{s+1}), skip_s)."""

    def __init__(self, c_enriched, skip_channels, stack_channels, k, rng):
        self.blocks = []
        for s in range(SCALES):
            above = c_enriched if s == SCALES - 1 else stack_channels[s + 1]
            self.blocks.append(Conv2d(above + skip_channels[s], stack_channels[s], k, rng))

    def forward(self, enriched, skips):
        if len(skips) != SCALES:
            raise ValueError(f"feature stack needs {SCALES} skip scales")
        out = [None] * SCALES
        cur = enriched
        for s in reversed(range(SCALES)):
            if s < SCALES - 1:
                cur = ag.upsample2(cur)
            cur = ag.leaky_relu(self.blocks[s](ag.concat([cur, skips[s]], axis=1)))
            out[s] = cur
        return out


class DepthDecoder(Module):
    """Per-scale residual heads on top of the hole-filled, downsampled input depth."""

    def __init__(self, stack_channels, hidden, k, rng):
        self.hidden = [Conv2d(c + 1, hidden, k, rng) for c in stack_channels]
        self.heads = [Conv2d(hidden, 1, k, rng, zero=True) for _ in stack_channels]

    def forward(self, stack, base, depth_norm, masks, residual_scale):
        out = []
        for s in range(SCALES):
            h = ag.leaky_relu(self.hidden[s](ag.concat([stack[s], depth_norm[s]], axis=1)))
            res = self.heads[s](h)[:, 0] * residual_scale
            out.append((res + base[s]) * masks[s])
        return out


# ---------------------------------------------------------------------------
# raster helpers
# ---------------------------------------------------------------------------
def fill_holes(values, valid):
    """Replace holes by the nearest valid depth (identity where valid)."""
    values = np.asarray(values, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if valid.all() or not valid.any():
        return np.where(valid, values, 0.0)
    _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return values[iy, ix]


def pool_valid(values, valid):
    """Validity-aware 2x downsampling: mean over valid children, valid if any child is."""
    H, W = values.shape[-2:]
    v = valid.reshape(valid.shape[:-2] + (H // 2, 2, W // 2, 2)).astype(np.float64)
    d = (np.where(valid, values, 0.0)).reshape(v.shape)
    cnt = v.sum(axis=(-3, -1))
    s = d.sum(axis=(-3, -1))
    return np.where(cnt > 0, s / np.maximum(cnt, 1), 0.0), cnt > 0


def depth_pyramid(values, valid):
    vals, oks = [np.asarray(values, dtype=np.float64)], [np.asarray(valid, dtype=bool)]
    for _ in range(SCALES - 1):
        v, o = pool_valid(vals[-1], oks[-1])
        vals.append(v)
        oks.append(o)
    return vals, oks


@dataclass
class PreparedViews:
    """Network inputs for V views, precomputed once per capture."""

    rgb: np.ndarray        # [V, 3, H, W] masked
    depth_in: np.ndarray   # [V, 2, H, W] normalised masked depth + mask
    base: list             # per scale [V, H_s, W_s] hole-filled depth (m)
    depth_norm: list       # per scale [V, 1, H_s, W_s]
    masks: list            # per scale [V, H_s, W_s] float
    cameras: list = field(default_factory=list)


def prepare_views(views, cfg):
    """Stack rasters of a ViewTriplet into network inputs."""
    rgb, din, bases, norms, masks = [], [], [[] for _ in range(SCALES)], [[] for _ in range(SCALES)], \
        [[] for _ in range(SCALES)]
    H, W = views[0].mask.shape
    if H % 8 or W % 8:
        raise ValueError(f"image extents must be divisible by 8, got {H}x{W}")
    for v in views:
        if v.rgb.shape[:2] != (H, W) or v.depth.values.shape != (H, W):
            raise ValueError("all views must share raster extents")
        m = np.asarray(v.mask, dtype=bool)
        valid = v.depth.valid & m
        filled = fill_holes(v.depth.values, valid)
        norm = (filled - cfg.depth_ref) * cfg.depth_scale * m
        rgb.append(np.transpose(v.rgb, (2, 0, 1)) * m)
        din.append(np.stack([norm, m.astype(np.float64)]))
        b = filled
        mk = m
        for s in range(SCALES):
            if s:
                b = b.reshape(b.shape[0] // 2, 2, b.shape[1] // 2, 2).mean(axis=(1, 3))
                mk = mk.reshape(mk.shape[0] // 2, 2, mk.shape[1] // 2, 2).any(axis=(1, 3))
            bases[s].append(b)
            masks[s].append(mk.astype(np.float64))
            norms[s].append(((b - cfg.depth_ref) * cfg.depth_scale * mk)[None])
    f32 = np.float32
    return PreparedViews(np.stack(rgb).astype(f32), np.stack(din).astype(f32),
                         [np.stack(b).astype(f32) for b in bases], [np.stack(n).astype(f32) for n in norms],
                         [np.stack(m).astype(f32) for m in masks], [v.camera for v in views])


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------
@dataclass
class FeatureOutput:
    stack: list       # psi_g per scale, Tensor [V, C_s, H_s, W_s]
    depth: list       # D_rf per scale, Tensor [V, H_s, W_s]
    masks: list       # per scale [V, H_s, W_s] numpy


class FeatureNet(Module):
    """Per-view geometry-aware feature stack and refined depth (shared weights across views)."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        c = cfg.channels
        self.enc_rgb = Encoder(3, c, cfg.kernel, rng)
        self.enc_depth = Encoder(2, c, cfg.kernel, rng)
        self.cam = CrossAttention(c[-1], c[-1], cfg.cam_channels, cfg.value_channels, cfg.cbam_reduction, rng)
        y = 2 * cfg.value_channels
        y_rgb = int(round(y * cfg.rgb_fraction))
        self.gam = GeometryAware(y, y_rgb, cfg.gam_local, cfg.gam_rgb, cfg.gam_dilation, rng)
        skips = [2 * ch for ch in c]
        self.topdown = TopDown(cfg.gam_rgb + 2 * cfg.gam_local, skips, cfg.stack_channels, cfg.kernel, rng)
        self.decoder = DepthDecoder(cfg.stack_channels, cfg.decoder_hidden, cfg.kernel, rng)

    def encode(self, rgb, depth_in):
        if rgb.shape[-2:] != depth_in.shape[-2:]:
            raise ValueError("RGB and depth inputs must share extents")
        return self.enc_rgb(rgb), self.enc_depth(depth_in)

    def forward(self, prep):
        sr, sd = self.encode(Tensor(prep.rgb), Tensor(prep.depth_in))
        Y = self.cam(sr[-1], sd[-1])
        enriched = self.gam(Y)
        skips = [ag.concat([a, b], axis=1) for a, b in zip(sr, sd)]
        stack = self.topdown(enriched, skips)
        base = [Tensor(b) for b in prep.base]
        norm = [Tensor(n) for n in prep.depth_norm]
        depth = self.decoder(stack, base, norm, prep.masks, self.cfg.residual_scale)
        return FeatureOutput(stack, depth, prep.masks)

    def backbone_parameters(self):
        return self.named_parameters()


# ---------------------------------------------------------------------------
# pixel-aligned sampling and view aggregation
# ---------------------------------------------------------------------------
def sampling_matrix(height, width, uv, valid_pixels=None):
    """Sparse [N, H*W] bilinear sampling operator (border clamp).

    With ``valid_pixels`` the weights are renormalised over valid neighbours and a
    row of four holes is returned empty with ok=False.
    """
    import scipy.sparse as sp

    from .geometry import bilinear_weights

    idx, w = bilinear_weights(height, width, uv)
    ok = np.ones(len(idx), dtype=bool)
    if valid_pixels is not None:
        w = w * np.asarray(valid_pixels, dtype=bool).ravel()[idx]
        s = w.sum(axis=1)
        ok = s > 1e-12
        w = np.where(ok[:, None], w / np.where(ok, s, 1)[:, None], 0)
    n = len(idx)
    S = sp.csr_matrix((w.ravel(), (np.repeat(np.arange(n), 4), idx.ravel())), shape=(n, height * width))
    return S, ok


def sample_views(feat, uvs):
    """Bilinear samples of ``feat`` [V, C, H, W] at ``uvs`` [V, N, 2] -> Tensor [V, N, C]."""
    import scipy.sparse as sp

    V, C, H, W = feat.shape
    N = uvs.shape[1]
    S = sp.block_diag([sampling_matrix(H, W, uvs[v])[0] for v in range(V)], format="csr")
    flat = ag.transpose(feat, (0, 2, 3, 1)).reshape(V * H * W, C)
    return ag.sparse_apply(S, flat).reshape(V, N, C)


def scale_uv(uv, s):
    """Pixel-centre coordinates at scale s (stride 2**s)."""
    f = 2.0 ** s
    return (uv + 0.5) / f - 0.5


class ViewAggregator(Module):
    """Transformer encoder over per-view tokens, averaged over the valid views."""

    def __init__(self, token_width, dim, heads, layers, ff, rng):
        self.token_width = token_width
        self.embed = Linear(token_width, dim, rng)
        self.layers = [TransformerEncoderLayer(dim, heads, ff, rng) for _ in range(layers)]

    def forward(self, tokens, valid=None):
        """tokens: [N, V, token_width]; valid: bool [N, V] or None -> [N, dim]."""
        if tokens.shape[-1] != self.token_width:
            raise ValueError(f"token width {tokens.shape[-1]} does not match aggregator width {self.token_width}")
        h = self.embed(tokens)
        for layer in self.layers:
            h = layer(h, valid)
        if valid is None:
            return h.mean(axis=-2)
        w = np.asarray(valid, dtype=h.dtype)
        cnt = np.maximum(w.sum(axis=-1, keepdims=True), 1.0)
        return ag.tsum(h * (w / cnt)[..., None], axis=-2)


def aggregate_views(aggregator, tokens, valid=None):
    return aggregator(tokens, valid)

"""Synthetic multi-view RGBD capture: analytic scenes, the three-camera rig, depth
rendering, sensor-noise synthesis and the frontal face crop."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Camera, DepthMap, Mesh, View, ViewTriplet
from .sampling import depth_jump_mask

SWEEP_NOISE_LEVELS_CM = (0.5, 1.0, 1.5, 2.0, 2.5)


# ---------------------------------------------------------------------------
# analytic scenes
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, X):
        return np.linalg.norm(X - np.asarray(self.center), axis=-1) - self.radius

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Capsule:
    a: tuple
    b: tuple
    radius: float

    def sdf(self, X):
        a, b = np.asarray(self.a, dtype=np.float64), np.asarray(self.b, dtype=np.float64)
        ab = b - a
        t = np.clip(((X - a) @ ab) / (ab @ ab), 0, 1)
        return np.linalg.norm(X - (a + t[..., None] * ab), axis=-1) - self.radius

    def bounds(self):
        a, b = np.asarray(self.a, dtype=np.float64), np.asarray(self.b, dtype=np.float64)
        return np.minimum(a, b) - self.radius, np.maximum(a, b) + self.radius


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple

    def sdf(self, X):
        q = np.abs(X - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0)

    def bounds(self):
        c, h = np.asarray(self.center, dtype=np.float64), np.asarray(self.half_extents, dtype=np.float64)
        return c - h, c + h


@dataclass(frozen=True)
class Union:
    children: tuple
    blend: float = 0.0

    def sdf(self, X):
        d = self.children[0].sdf(X)
        for child in self.children[1:]:
            e = child.sdf(X)
            if self.blend > 0:
                k = self.blend
                h = np.clip(0.5 + 0.5 * (e - d) / k, 0, 1)
                d = e * (1 - h) + d * h - k * h * (1 - h)
            else:
                d = np.minimum(d, e)
        return d

    def bounds(self):
        lo, hi = zip(*(c.bounds() for c in self.children))
        return np.min(lo, axis=0), np.max(hi, axis=0)


class SceneSdf:
    """Signed distance (metres, negative inside) of a composite of primitives."""

    def __init__(self, shape):
        self.shape = shape

    def sdf(self, X):
        X = np.asarray(X, dtype=np.float64)
        return self.shape.sdf(X)

    __call__ = sdf

    def bounds(self, expand=0.0):
        lo, hi = self.shape.bounds()
        pad = (hi - lo) * expand
        return lo - pad, hi + pad

    def gradient(self, X, h=1e-5):
        X = np.asarray(X, dtype=np.float64)
        g = np.empty_like(X)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[..., k] = (self.sdf(X + e) - self.sdf(X - e)) / (2 * h)
        return g

    @classmethod
    def from_json(cls, d):
        if set(d) - {"primitives", "blend"}:
            raise ValueError(f"unknown scene keys: {sorted(set(d) - {'primitives', 'blend'})}")
        prims = []
        for p in d["primitives"]:
            kind = p.get("type")
            keys = set(p) - {"type"}
            if kind == "sphere" and keys == {"center", "radius"}:
                prims.append(Sphere(tuple(p["center"]), float(p["radius"])))
            elif kind == "capsule" and keys == {"a", "b", "radius"}:
                prims.append(Capsule(tuple(p["a"]), tuple(p["b"]), float(p["radius"])))
            elif kind == "box" and keys == {"center", "half_extents"}:
                prims.append(Box(tuple(p["center"]), tuple(p["half_extents"])))
            else:
                raise ValueError(f"bad primitive description: {p}")
        if not prims:
            raise ValueError("scene has no primitives")
        return cls(Union(tuple(prims), float(d.get("blend", 0.0))))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def sphere_capsule_scene():
    """The desk-scale test subject: a spherical head smoothly joined to a capsule torso."""
    return SceneSdf(Union((Sphere((0.0, 0.42, 0.0), 0.14),
                           Capsule((0.0, -0.35, 0.0), (0.0, 0.12, 0.0), 0.19)), blend=0.05))


SPHERE_CAPSULE_JSON = {
    "primitives": [
        {"type": "sphere", "center": [0.0, 0.42, 0.0], "radius": 0.14},
        {"type": "capsule", "a": [0.0, -0.35, 0.0], "b": [0.0, 0.12, 0.0], "radius": 0.19},
    ],
    "blend": 0.05,
}


# ---------------------------------------------------------------------------
# rig
# ---------------------------------------------------------------------------
@dataclass
class Rig:
    """Cameras on a horizontal circle around the subject, looking at the rig axis."""

    radius_m: float = 1.8
    height_m: float = 0.0
    image_size: int = 512
    azimuths_deg: tuple = (0.0, 135.0, -135.0)
    fov_deg: float = 40.0

    def cameras(self):
        W = self.image_size
        f = (W / 2.0) / np.tan(np.deg2rad(self.fov_deg) / 2.0)
        c = (W - 1) / 2.0
        cams = []
        for az in self.azimuths_deg:
            a = np.deg2rad(az)
            eye = (self.radius_m * np.sin(a), self.height_m, self.radius_m * np.cos(a))
            cams.append(Camera.look_at(eye, (0.0, self.height_m, 0.0), (0.0, 1.0, 0.0), f, f, c, c, W, W))
        return cams

    def gaps_deg(self):
        az = np.mod(np.asarray(self.azimuths_deg, dtype=np.float64), 360.0)
        order = np.sort(az)
        return np.diff(np.r_[order, order[0] + 360.0])

    @classmethod
    def from_json(cls, d):
        allowed = {"radius_m", "height_m", "image_size", "azimuths_deg", "fov_deg"}
        if set(d) - allowed:
            raise ValueError(f"unknown rig keys: {sorted(set(d) - allowed)}")
        kw = dict(d)
        if "azimuths_deg" in kw:
            kw["azimuths_deg"] = tuple(float(a) for a in kw["azimuths_deg"])
        return cls(**kw)

    def to_json(self):
        return {"radius_m": self.radius_m, "height_m": self.height_m, "image_size": self.image_size,
                "azimuths_deg": list(self.azimuths_deg), "fov_deg": self.fov_deg}


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------
MAX_STEPS = 256
SURFACE_TOL = 1e-4
ALBEDO = np.array([0.85, 0.72, 0.62])


def _sphere_trace(scene, camera):
    dirs, cosf = camera.rays()
    H, W = cosf.shape
    d = dirs.reshape(-1, 3)
    o = camera.center
    lo, hi = scene.bounds()
    mid = (lo + hi) / 2
    rad = np.linalg.norm(hi - lo) / 2
    # start on the bounding sphere to save steps
    t = np.full(len(d), max(np.linalg.norm(o - mid) - rad, 0.0))
    t_far = np.linalg.norm(o - mid) + rad
    hit = np.zeros(len(d), dtype=bool)
    active = np.ones(len(d), dtype=bool)
    for _ in range(MAX_STEPS):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        s = scene.sdf(o + t[idx, None] * d[idx])
        done = s < SURFACE_TOL
        hit[idx[done]] = True
        t[idx[~done]] += s[~done]
        gone = t[idx] > t_far
        active[idx[done | gone]] = False
    X = o + t[:, None] * d
    n = scene.gradient(X[hit])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    shade = np.zeros(len(d))
    shade[hit] = np.clip(-(n * d[hit]).sum(axis=1), 0, 1)
    depth = np.where(hit, t * cosf.ravel(), 0.0)
    return depth.reshape(H, W), hit.reshape(H, W), shade.reshape(H, W)


def _rasterize_mesh(mesh, camera, chunk=2048):
    H, W = camera.height, camera.width
    zbuf = np.full(H * W, np.inf)
    shade_buf = np.zeros(H * W)
    Vc = camera.to_camera(mesh.vertices)
    uv, z, ok = camera.project(mesh.vertices)
    fn = mesh.face_normals() @ camera.R.T
    F = mesh.faces
    keep = ok[F].all(axis=1)
    F, fn = F[keep], fn[keep]
    tuv = uv[F]
    u0 = np.clip(np.ceil(tuv[..., 0].min(axis=1)), 0, W).astype(np.int64)
    u1 = np.clip(np.floor(tuv[..., 0].max(axis=1)), -1, W - 1).astype(np.int64)
    v0 = np.clip(np.ceil(tuv[..., 1].min(axis=1)), 0, H).astype(np.int64)
    v1 = np.clip(np.floor(tuv[..., 1].max(axis=1)), -1, H - 1).astype(np.int64)
    nu = np.maximum(u1 - u0 + 1, 0)
    nv = np.maximum(v1 - v0 + 1, 0)
    for s in range(0, len(F), chunk):
        sl = slice(s, s + chunk)
        counts = nu[sl] * nv[sl]
        if counts.sum() == 0:
            continue
        tri = np.repeat(np.arange(s, min(s + chunk, len(F))), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        pu = u0[tri] + local % nu[tri]
        pv = v0[tri] + local // nu[tri]
        ray = np.stack([(pu - camera.cx) / camera.fx, (pv - camera.cy) / camera.fy, np.ones(len(pu))], axis=1)
        A, B, C = Vc[F[tri, 0]], Vc[F[tri, 1]], Vc[F[tri, 2]]
        e1, e2 = B - A, C - A
        p = np.cross(ray, e2)
        det = (e1 * p).sum(axis=1)
        good = np.abs(det) > 1e-15
        inv = 1.0 / np.where(good, det, 1.0)
        tvec = -A
        bu = (tvec * p).sum(axis=1) * inv
        q = np.cross(tvec, e1)
        bv = (ray * q).sum(axis=1) * inv
        tt = (e2 * q).sum(axis=1) * inv
        eps = 1e-9
        inside = good & (bu >= -eps) & (bv >= -eps) & (bu + bv <= 1 + eps) & (tt > 1e-6)
        pix = (pv * W + pu)[inside]
        depth = tt[inside]
        order = np.lexsort((depth, pix))
        pix, depth, tri_in = pix[order], depth[order], tri[inside][order]
        first = np.r_[True, pix[1:] != pix[:-1]]
        pix, depth, tri_in = pix[first], depth[first], tri_in[first]
        closer = depth < zbuf[pix]
        zbuf[pix[closer]] = depth[closer]
        r = ray[inside][order][first][closer]
        r /= np.linalg.norm(r, axis=1, keepdims=True)
        shade_buf[pix[closer]] = np.abs((fn[tri_in[closer]] * r).sum(axis=1))
    hit = np.isfinite(zbuf)
    return np.where(hit, zbuf, 0).reshape(H, W), hit.reshape(H, W), shade_buf.reshape(H, W)


def render_depth(scene, camera):
    """First-hit camera depth and hit mask for a Mesh (ray-triangle) or SceneSdf (sphere tracing)."""
    depth, hit, _ = _render(scene, camera)
    return DepthMap(depth, hit), hit


def _render(scene, camera):
    if isinstance(scene, Mesh):
        return _rasterize_mesh(scene, camera)
    return _sphere_trace(scene, camera)


def render_view(scene, camera):
    """Noise-free RGBD view; RGB is Lambertian shading under a headlight."""
    depth, hit, shade = _render(scene, camera)
    rgb = np.where(hit[..., None], ALBEDO * (0.15 + 0.85 * shade[..., None]), 0.0)
    return View(rgb.astype(np.float32), DepthMap(depth, hit), hit, camera)


def render_views(scene, cameras):
    return ViewTriplet([render_view(scene, c) for c in cameras])


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------
@dataclass
class NoiseModel:
    sigma_base: float = 0.01
    depth_coeff: float = 0.0
    dropout_rate: float = 0.3
    jump_threshold: float = 0.06
    correlation_px: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_base < 0:
            raise ValueError("sigma_base must be non-negative")
        if not 0 <= self.dropout_rate <= 1:
            raise ValueError("dropout_rate must lie in [0, 1]")

    def sigma(self, d):
        return self.sigma_base * (1.0 + self.depth_coeff * (d - 1.0) ** 2)


def parse_noise_level(text):
    """'1.0cm' / '5mm' / '0.01m' / bare number of centimetres -> metres."""
    s = str(text).strip().lower()
    for suffix, scale in (("cm", 0.01), ("mm", 0.001), ("m", 1.0)):
        if s.endswith(suffix):
            return float(s[:-len(suffix)]) * scale
    return float(s) * 0.01


def add_noise(depth_gt, model, view_index=0):
    """Axial Gaussian noise plus random dropout inside the depth-jump band.

    Each view draws from its own stream keyed by (seed, view_index).
    """
    rng = np.random.default_rng([model.seed, view_index])
    d = depth_gt.values.astype(np.float64)
    n = rng.standard_normal(d.shape)
    if model.correlation_px > 0:
        delta = np.zeros((33, 33))
        delta[16, 16] = 1
        gain = np.sqrt((ndimage.gaussian_filter(delta, model.correlation_px) ** 2).sum())
        n = ndimage.gaussian_filter(n, model.correlation_px) / gain
    drop_draw = rng.random(d.shape)
    noisy = np.where(depth_gt.valid, d + n * model.sigma(d), 0.0)
    valid = depth_gt.valid & (noisy > 0)
    if model.dropout_rate > 0:
        band = depth_jump_mask(depth_gt, model.jump_threshold)
        valid &= ~(band & (drop_draw < model.dropout_rate))
    if model.sigma_base == 0 and model.dropout_rate == 0:
        return DepthMap(depth_gt.values.copy(), depth_gt.valid.copy())
    return DepthMap(np.where(valid, noisy, 0), valid)


# ---------------------------------------------------------------------------
# face crop
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CropTransform:
    """Maps full-image pixels to the crop and to its upsampled version (pixel-center convention)."""

    box: tuple  # (x0, y0, x1, y1), half-open in pixels
    out_size: tuple  # (width, height) of the upsampled crop

    @property
    def scale(self):
        x0, y0, x1, y1 = self.box
        return self.out_size[0] / (x1 - x0), self.out_size[1] / (y1 - y0)

    def to_crop(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        return uv - np.array([self.box[0], self.box[1]], dtype=np.float64)

    def from_crop(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        return uv + np.array([self.box[0], self.box[1]], dtype=np.float64)

    def to_up(self, uv):
        s = np.array(self.scale)
        return (self.to_crop(uv) + 0.5) * s - 0.5

    def from_up(self, uv):
        s = np.array(self.scale)
        return self.from_crop((np.asarray(uv, dtype=np.float64) + 0.5) / s - 0.5)

    def inside(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        x0, y0, x1, y1 = self.box
        return ((uv[..., 0] >= x0 - 0.5) & (uv[..., 0] < x1 - 0.5) &
                (uv[..., 1] >= y0 - 0.5) & (uv[..., 1] < y1 - 0.5))


@dataclass
class FaceCrop:
    rgb: np.ndarray
    depth: DepthMap
    mask: np.ndarray
    transform: CropTransform
    camera: Camera = field(repr=False, default=None)


def face_crop(view, box, out_size=None, face_mask=None):
    """Crop the frontal rasters to the pixel box ``(x0, y0, x1, y1)`` (half-open)."""
    x0, y0, x1, y1 = (int(v) for v in box)
    H, W = view.mask.shape
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, W), min(y1, H)
    if x1 <= x0 or y1 <= y0:
        raise ValueError("face box does not intersect the image")
    sl = (slice(y0, y1), slice(x0, x1))
    mask = view.mask if face_mask is None else face_mask
    depth = DepthMap(view.depth.values[sl], view.depth.valid[sl])
    out = out_size or (x1 - x0, y1 - y0)
    return FaceCrop(view.rgb[sl].copy(), depth, np.asarray(mask)[sl].copy(),
                    CropTransform((x0, y0, x1, y1), tuple(out)), view.camera)


def face_box_from_3d(camera, lo, hi, margin_px=0):
    """Pixel box enclosing the projection of an axis-aligned 3D box."""
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    uv, _, ok = camera.project(corners)
    if not ok.all():
        raise ValueError("face box straddles the camera plane")
    x0 = int(np.floor(uv[:, 0].min() + 0.5)) - margin_px
    y0 = int(np.floor(uv[:, 1].min() + 0.5)) - margin_px
    x1 = int(np.floor(uv[:, 0].max() + 0.5)) + 1 + margin_px
    y1 = int(np.floor(uv[:, 1].max() + 0.5)) + 1 + margin_px
    return (max(x0, 0), max(y0, 0), min(x1, camera.width), min(y1, camera.height))


def face_mask_from_3d(view, lo, hi):
    """Pixels whose back-projected surface point lies inside the 3D face box."""
    uv = view.camera.pixel_grid()
    X = view.camera.back_project(uv, view.depth.values.astype(np.float64))
    inside = np.all((X >= np.asarray(lo)) & (X <= np.asarray(hi)), axis=-1)
    return inside & view.depth.valid


def upsample_raster(arr, out_size, order=1):
    """Resize [H, W] or [H, W, C] to (width, height) with the pixel-center convention."""
    arr = np.asarray(arr)
    H, W = arr.shape[:2]
    ow, oh = out_size
    v = np.clip((np.arange(oh) + 0.5) * H / oh - 0.5, 0, H - 1)
    u = np.clip((np.arange(ow) + 0.5) * W / ow - 0.5, 0, W - 1)
    V, U = np.meshgrid(v, u, indexing="ij")
    if order == 0:
        return arr[np.floor(V + 0.5).astype(int).clip(0, H - 1), np.floor(U + 0.5).astype(int).clip(0, W - 1)]
    from .geometry import bilinear_sample

    return bilinear_sample(arr.astype(np.float64), np.stack([U, V], axis=-1))

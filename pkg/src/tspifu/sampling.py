"""Ground-truth occupancy labels and the training point sets.

Covers the near-surface / uniform body samples, the facial flag that selects
points for the face field, the depth-jump mask, and the S_j flags that route
points into the normal-consistency regulariser.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import DepthMap, Mesh, bilinear_sample, nearest_index, watertight_defect

TAGS = {"S0_body": 0, "S1_face": 1}
TAG_NAMES = {v: k for k, v in TAGS.items()}
BATCH_MAGIC = b"PFSB"


class NotWatertightError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sample containers
# ---------------------------------------------------------------------------
@dataclass
class SampleBatch:
    points: np.ndarray
    labels: np.ndarray
    v_f: np.ndarray
    s_j: np.ndarray
    tag: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        n = len(self.points)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        self.v_f = np.asarray(self.v_f, dtype=bool).reshape(-1)
        self.s_j = np.asarray(self.s_j, dtype=bool).reshape(-1)
        self.tag = np.asarray(self.tag, dtype=np.uint8).reshape(-1)
        if not (len(self.labels) == len(self.v_f) == len(self.s_j) == len(self.tag) == n):
            raise ValueError("all sample arrays must share one length")
        if len(self.labels) and self.labels.max() > 1:
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return len(self.points)

    @classmethod
    def create(cls, points, labels, tag="S0_body"):
        n = len(points)
        return cls(points, labels, np.zeros(n, bool), np.zeros(n, bool), np.full(n, TAGS[tag], np.uint8))

    def subset(self, idx):
        return SampleBatch(self.points[idx], self.labels[idx], self.v_f[idx], self.s_j[idx], self.tag[idx])

    def project(self, cameras):
        """Per-view pixel positions [V, N, 2], depths [V, N] and validity [V, N]."""
        uv, z, ok = zip(*(c.project(self.points.astype(np.float64)) for c in cameras))
        return np.stack(uv), np.stack(z), np.stack(ok)

    @staticmethod
    def concat(batches):
        return SampleBatch(*(np.concatenate([getattr(b, f) for b in batches])
                             for f in ("points", "labels", "v_f", "s_j", "tag")))

    def dumps(self):
        header = json.dumps({"count": len(self), "fields": ["xyz:f32x3", "label:u8", "v_f:u8", "s_j:u8", "tag:u8"],
                             "tags": TAGS}, sort_keys=True).encode("utf-8")
        return b"".join([BATCH_MAGIC, struct.pack("<I", len(header)), header,
                         self.points.astype("<f4").tobytes(), self.labels.astype("u1").tobytes(),
                         self.v_f.astype("u1").tobytes(), self.s_j.astype("u1").tobytes(),
                         self.tag.astype("u1").tobytes()])

    @classmethod
    def loads(cls, buf):
        if buf[:4] != BATCH_MAGIC:
            raise ValueError("not a sample batch file")
        (hl,) = struct.unpack_from("<I", buf, 4)
        header = json.loads(buf[8:8 + hl].decode("utf-8"))
        n = header["count"]
        pos = 8 + hl
        pts = np.frombuffer(buf, "<f4", 3 * n, pos).reshape(n, 3)
        pos += 12 * n
        cols = []
        for _ in range(4):
            cols.append(np.frombuffer(buf, "u1", n, pos))
            pos += n
        if pos != len(buf):
            raise ValueError("sample batch size does not match its header")
        return cls(pts.copy(), cols[0].copy(), cols[1].astype(bool), cols[2].astype(bool), cols[3].copy())

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.loads(fh.read())


# ---------------------------------------------------------------------------
# occupancy oracle
# ---------------------------------------------------------------------------
_PARITY_DIRS = np.array([[1.0, 0.0123, 0.0071], [0.0093, 1.0, -0.0117], [-0.0081, 0.0137, 1.0]])


class OccupancyOracle:
    """Inside/outside labels from a watertight mesh (ray parity) or an SDF (sign test)."""

    def __init__(self, source):
        if isinstance(source, Mesh):
            defect = watertight_defect(source)
            if defect is not None:
                raise NotWatertightError(f"mesh is not watertight: {defect}")
        self.source = source

    def occupied(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        if isinstance(self.source, Mesh):
            votes = sum(_parity_inside(X, self.source.triangles(), d / np.linalg.norm(d)) for d in _PARITY_DIRS)
            return (votes >= 2).astype(np.uint8)
        return (self.source.sdf(X) <= 0).astype(np.uint8)

    def bounds(self):
        if isinstance(self.source, Mesh):
            return self.source.bounds()
        return self.source.bounds()


def occupied(oracle, X):
    return oracle.occupied(X)


def _parity_inside(P, tri, d):
    """Odd number of crossings along +d; triangles are bucketed on a grid orthogonal to d."""
    e1 = np.cross(d, [0.3, 0.5, 0.7])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    basis = np.stack([e1, e2], axis=1)
    P2 = P @ basis
    T2 = tri @ basis
    lo, hi = T2.min(axis=1), T2.max(axis=1)
    gmin = lo.min(axis=0)
    cell = max(float(np.median(hi - lo)) * 2.0, 1e-9)
    gdim = np.maximum(np.ceil((hi.max(axis=0) - gmin) / cell).astype(np.int64) + 1, 1)
    c0 = np.floor((lo - gmin) / cell).astype(np.int64)
    c1 = np.floor((hi - gmin) / cell).astype(np.int64)
    na = c1[:, 0] - c0[:, 0] + 1
    nb = c1[:, 1] - c0[:, 1] + 1
    cnt = na * nb
    t_id = np.repeat(np.arange(len(tri)), cnt)
    local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    ca = c0[t_id, 0] + local % na[t_id]
    cb = c0[t_id, 1] + local // na[t_id]
    cell_id = ca * gdim[1] + cb
    order = np.argsort(cell_id, kind="stable")
    cell_id, t_id = cell_id[order], t_id[order]
    starts = np.searchsorted(cell_id, np.arange(gdim[0] * gdim[1] + 1))

    pc = np.floor((P2 - gmin) / cell).astype(np.int64)
    inb = (pc[:, 0] >= 0) & (pc[:, 0] < gdim[0]) & (pc[:, 1] >= 0) & (pc[:, 1] < gdim[1])
    crossings = np.zeros(len(P), dtype=np.int64)
    pidx = np.nonzero(inb)[0]
    pcell = pc[pidx, 0] * gdim[1] + pc[pidx, 1]
    s, e = starts[pcell], starts[pcell + 1]
    n = e - s
    rows = np.repeat(pidx, n)
    cand = t_id[np.repeat(s, n) + (np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n))]
    chunk = 1 << 20
    for a in range(0, len(rows), chunk):
        r, c = rows[a:a + chunk], cand[a:a + chunk]
        A, B, C = tri[c, 0], tri[c, 1], tri[c, 2]
        e1_, e2_ = B - A, C - A
        p = np.cross(d, e2_)
        det = (e1_ * p).sum(axis=1)
        good = np.abs(det) > 1e-14
        inv = 1.0 / np.where(good, det, 1.0)
        tv = P[r] - A
        u = (tv * p).sum(axis=1) * inv
        q = np.cross(tv, e1_)
        v = (q @ d) * inv
        t = (e2_ * q).sum(axis=1) * inv
        hit = good & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        crossings += np.bincount(r[hit], minlength=len(P))
    return (crossings % 2).astype(np.int64)


def project_to_surface(scene, X, iters=3):
    """Move points onto the zero level set of an SDF by Newton steps along its gradient."""
    X = np.asarray(X, dtype=np.float64).copy()
    for _ in range(iters):
        g = scene.gradient(X)
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        X -= scene.sdf(X)[:, None] * g
    return X


def sample_training_points(oracle, mesh_surface, n, sigma_near=0.05, uniform_frac=0.2, seed=0,
                           tag="S0_body", bounds=None):
    """Near-surface samples (Gaussian offsets) plus uniform samples in the 10%-expanded box."""
    if n <= 0:
        raise ValueError("sample count must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    n_uni = int(round(uniform_frac * n))
    n_surf = n - n_uni
    from .geometry import sample_surface

    parts = []
    if n_surf:
        pts, _ = sample_surface(mesh_surface, n_surf, rng)
        if not isinstance(oracle.source, Mesh):
            pts = project_to_surface(oracle.source, pts)
        parts.append(pts + rng.normal(scale=sigma_near, size=pts.shape))
    if n_uni:
        lo, hi = bounds if bounds is not None else oracle.bounds()
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        pad = 0.05 * (hi - lo)
        parts.append(rng.uniform(lo - pad, hi + pad, size=(n_uni, 3)))
    X = np.concatenate(parts).astype(np.float32)
    return SampleBatch.create(X, oracle.occupied(X), tag)


# ---------------------------------------------------------------------------
# facial points and depth-jump regions
# ---------------------------------------------------------------------------
def face_depth_sample(face_depth, transform, uv_full):
    """Sample a face-crop depth raster (native or upsampled resolution) at full-image pixels."""
    up_shape = (transform.out_size[1], transform.out_size[0])
    crop_shape = (transform.box[3] - transform.box[1], transform.box[2] - transform.box[0])
    if face_depth.values.shape == up_shape and up_shape != crop_shape:
        uv = transform.to_up(uv_full)
    else:
        uv = transform.to_crop(uv_full)
    return bilinear_sample(face_depth, uv)


def facial_flag(X, camera, face_depth, transform, alpha=0.15):
    """True where the frontal projection is inside the face box and |PSDF| < alpha."""
    uv, z, ok = camera.project(np.asarray(X, dtype=np.float64).reshape(-1, 3))
    inside = ok & transform.inside(uv)
    d, valid = face_depth_sample(face_depth, transform, uv)
    return inside & valid & (np.abs(z - d) < alpha)


def depth_jump_mask(depth, th=0.06):
    """Pixels whose 3x3 neighbourhood spans more than ``th`` metres of valid depth,
    or mixes valid pixels with holes."""
    v = depth.valid
    d = depth.values.astype(np.float64)
    hi = ndimage.maximum_filter(np.where(v, d, -np.inf), size=3, mode="nearest")
    lo = ndimage.minimum_filter(np.where(v, d, np.inf), size=3, mode="nearest")
    any_valid = ndimage.maximum_filter(v.astype(np.uint8), size=3, mode="nearest") > 0
    any_hole = ndimage.maximum_filter((~v).astype(np.uint8), size=3, mode="nearest") > 0
    with np.errstate(invalid="ignore"):
        spread = np.where(any_valid, hi - lo, 0.0)
    return (spread > th) | (any_valid & any_hole)


def mark_sj(batch, jump_masks, cameras, k=0):
    """Flag points whose nearest-sampled jump mask is set in more than ``k`` views."""
    counts = np.zeros(len(batch), dtype=np.int64)
    for m, cam in zip(jump_masks, cameras):
        if m.shape != (cam.height, cam.width):
            raise ValueError("jump mask does not match its camera")
        uv, _, ok = cam.project(batch.points.astype(np.float64))
        counts += ok & np.asarray(m, dtype=bool).ravel()[nearest_index(cam.height, cam.width, uv)]
    return SampleBatch(batch.points, batch.labels, batch.v_f, counts > k, batch.tag)


def mark_facial(batch, camera, face_depth, transform, alpha=0.15):
    flags = facial_flag(batch.points, camera, face_depth, transform, alpha)
    return SampleBatch(batch.points, batch.labels, flags, batch.s_j, batch.tag)


def sample_body_and_face(oracle, body_surface, face_surface, n_total, camera, face_depth, transform,
                         alpha=0.15, sigma_body=0.05, sigma_face=0.015, seed=0, max_rounds=20):
    """Equal body/face split of ``n_total`` joint-training points.

    Face candidates are near the face surface and kept only if their facial flag is set.
    """
    half = n_total // 2
    body = sample_training_points(oracle, body_surface, n_total - half, sigma_body, 0.2, seed, "S0_body")
    faces = []
    have = 0
    for r in range(max_rounds):
        cand = sample_training_points(oracle, face_surface, 2 * half, sigma_face, 0.0, seed + 1 + r, "S1_face")
        keep = facial_flag(cand.points, camera, face_depth, transform, alpha)
        faces.append(cand.subset(np.nonzero(keep)[0]))
        have += int(keep.sum())
        if have >= half:
            break
    face = SampleBatch.concat(faces).subset(np.arange(min(half, have)))
    face = SampleBatch(face.points, face.labels, np.ones(len(face), bool), face.s_j, face.tag)
    return SampleBatch.concat([body, face])


def as_depthmap(values):
    return values if isinstance(values, DepthMap) else DepthMap.from_array(values)

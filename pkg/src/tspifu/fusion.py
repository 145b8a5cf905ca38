"""Face-to-body blending, dense grid evaluation, marching cubes and a TSDF baseline."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._mc_table import TRI_TABLE
from .geometry import DepthMap, Mesh, bilinear_sample
from .sampling import face_depth_sample

log = logging.getLogger(__name__)

BETA = 1e3
ISO = 0.5

CORNERS = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)], dtype=np.int64)
EDGES = np.array([(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
                  (0, 4), (1, 5), (2, 6), (3, 7)], dtype=np.int64)


def _tables():
    tri = np.full((256, 16), -1, dtype=np.int64)
    for i, row in enumerate(TRI_TABLE):
        tri[i, :len(row)] = row
    ntri = np.array([len(r) // 3 for r in TRI_TABLE], dtype=np.int64)
    a, b = CORNERS[EDGES[:, 0]], CORNERS[EDGES[:, 1]]
    edge_base = np.minimum(a, b)
    edge_axis = np.argmax(np.abs(a - b), axis=1)
    return tri, ntri, edge_base, edge_axis


_TRI, _NTRI, _EDGE_BASE, _EDGE_AXIS = _tables()


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------
@dataclass
class OccupancyGrid:
    """Occupancy sampled at voxel centres of an axis-aligned box."""

    values: np.ndarray  # [nx, ny, nz]
    bounds: np.ndarray  # [[xmin, ymin, zmin], [xmax, ymax, zmax]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if self.values.ndim != 3:
            raise ValueError("grid values must be a 3-d array")
        if np.any(self.bounds[1] <= self.bounds[0]):
            raise ValueError("grid bounds need a strictly positive extent")
        if not np.all(np.isfinite(self.values)) or self.values.min(initial=0) < 0 or self.values.max(initial=0) > 1:
            raise ValueError("grid values must be finite and within [0, 1]")

    @property
    def resolution(self):
        return tuple(int(n) for n in self.values.shape)

    @property
    def voxel_size(self):
        return (self.bounds[1] - self.bounds[0]) / np.array(self.resolution)

    def axes(self):
        lo, vs = self.bounds[0], self.voxel_size
        return tuple(lo[k] + (np.arange(n) + 0.5) * vs[k] for k, n in enumerate(self.resolution))

    def save(self, path):
        path = Path(path)
        path.write_bytes(np.ascontiguousarray(self.values, dtype="<f4").tobytes())
        meta = {"resolution": list(self.resolution), "bounds": self.bounds.tolist(), "order": "C", "dtype": "<f4"}
        Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        res = tuple(int(n) for n in meta["resolution"])
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        if raw.size != int(np.prod(res)):
            raise ValueError(f"{path}: expected {np.prod(res)} values, found {raw.size}")
        return cls(raw.reshape(res), meta["bounds"])


def grid_points(bounds, resolution):
    """Voxel-centre coordinates [nx*ny*nz, 3] in C order."""
    res = _resolution(resolution)
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    vs = (bounds[1] - bounds[0]) / np.array(res)
    axes = [bounds[0, k] + (np.arange(n) + 0.5) * vs[k] for k, n in enumerate(res)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def _resolution(resolution):
    res = (int(resolution),) * 3 if np.isscalar(resolution) else tuple(int(n) for n in resolution)
    if len(res) != 3 or min(res) < 2:
        raise ValueError("resolution must be at least 2 along each axis")
    return res


def evaluate_grid(field, bounds, resolution, chunk=65536):
    """Query ``field`` at every voxel centre, ``chunk`` points at a time, in a fixed order."""
    res = _resolution(resolution)
    X = grid_points(bounds, res)
    out = np.empty(len(X), dtype=np.float32)
    for i in range(0, len(X), chunk):
        out[i:i + chunk] = np.clip(field.query(X[i:i + chunk]), 0, 1)
    return OccupancyGrid(out.reshape(res), bounds)


# ---------------------------------------------------------------------------
# marching cubes
# ---------------------------------------------------------------------------
def marching_cubes(grid, iso=ISO):
    """Iso-surface of an OccupancyGrid as a welded triangle mesh.

    Values above ``iso`` count as inside; triangles are wound so that normals point
    out of the occupied region.
    """
    v = np.asarray(grid.values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("grid values must be finite")
    nx, ny, nz = v.shape
    inside = v > iso
    cases = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for k, (a, b, c) in enumerate(CORNERS):
        cases |= inside[a:nx - 1 + a, b:ny - 1 + b, c:nz - 1 + c].astype(np.int64) << k
    cells = np.nonzero(_NTRI[cases] > 0)
    if len(cells[0]) == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cidx = np.stack(cells, axis=1)
    ccase = cases[cells]
    counts = _NTRI[ccase]
    owner = np.repeat(np.arange(len(cidx)), counts)
    slot = np.arange(len(owner)) - np.repeat(np.cumsum(counts) - counts, counts)
    cols = slot[:, None] * 3 + np.arange(3)
    edges = _TRI[ccase[owner][:, None], cols]  # [T, 3] local edge ids
    # a grid edge is named by its lower corner and axis
    base = cidx[owner][:, :, None] + _EDGE_BASE[edges].transpose(0, 2, 1)  # [T, 3(xyz), 3(tri)]
    axis = _EDGE_AXIS[edges]
    gid = ((axis * nx + base[:, 0]) * ny + base[:, 1]) * nz + base[:, 2]
    uniq, inv = np.unique(gid.ravel(), return_inverse=True)
    rest, k0 = np.divmod(uniq, nz)
    rest, j0 = np.divmod(rest, ny)
    ax, i0 = np.divmod(rest, nx)
    p0 = np.stack([i0, j0, k0], axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[ax]
    v0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = np.clip((iso - v0) / (v1 - v0), 0.0, 1.0)
    idx = p0 + t[:, None] * (p1 - p0)
    verts = grid.bounds[0] + (idx + 0.5) * grid.voxel_size
    faces = inv.reshape(-1, 3)[:, ::-1]
    return Mesh(verts, faces)


# ---------------------------------------------------------------------------
# face-to-body fusion
# ---------------------------------------------------------------------------
def erode_weights(mask, w=8):
    """Soft erosion of a binary mask over a band of ``w`` pixels.

    Boundary pixels (distance 1 to the complement) get 0 and the ramp is linear in the
    Euclidean distance up to 1 at depth ``w``; ``w=1`` is a hard one-pixel erosion.
    """
    if w < 1:
        raise ValueError("erosion width must be at least 1 pixel")
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        log.warning("erode_weights: empty mask")
        return np.zeros(m.shape)
    dist = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1]
    if w == 1:
        return (dist > 1.0).astype(np.float64)
    return np.clip((dist - 1.0) / (w - 1), 0.0, 1.0)


def _crop_sample(raster, transform, uv_full):
    if isinstance(raster, DepthMap):
        return face_depth_sample(raster, transform, uv_full)
    up_shape = (transform.out_size[1], transform.out_size[0])
    crop_shape = (transform.box[3] - transform.box[1], transform.box[2] - transform.box[0])
    arr = np.asarray(raster)
    uv = transform.to_up(uv_full) if arr.shape == up_shape and up_shape != crop_shape else transform.to_crop(uv_full)
    return bilinear_sample(arr, uv)


def fusion_weight(X, camera, transform, eroded, face_depth, beta=BETA):
    """omega = B(M^e_f, x_f) * exp(-beta * P^2) with the untruncated face PSDF P.

    Zero where the face depth is a hole or the projection misses the crop.
    """
    uv, z, ok = camera.project(np.asarray(X, dtype=np.float64).reshape(-1, 3))
    inside = ok & transform.inside(uv)
    me = np.clip(_crop_sample(eroded, transform, uv), 0.0, 1.0)
    d, valid = _crop_sample(face_depth, transform, uv)
    P = np.where(valid, z - d, 0.0)
    return np.where(inside & valid, me * np.exp(-beta * P * P), 0.0)


def fuse(sigma_b, sigma_f, omega):
    """omega * sigma_f + (1 - omega) * sigma_b, kept inside [min, max] of the inputs."""
    sb = np.asarray(sigma_b, dtype=np.float64)
    sf = np.asarray(sigma_f, dtype=np.float64)
    w = np.asarray(omega, dtype=np.float64)
    out = w * sf + (1.0 - w) * sb
    return np.clip(out, np.minimum(sb, sf), np.maximum(sb, sf))


class FusedField:
    """Body field with the face field blended in at facial points.

    ``face`` needs ``flags(X)``, ``query(X, v_f)``, ``camera``, ``transform`` and
    ``face_depth()``; non-facial points return the body value untouched.
    """

    def __init__(self, body, face=None, eroded=None, beta=BETA):
        self.body = body
        self.face = face
        self.eroded = eroded
        self.beta = beta

    def query(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        sigma = np.asarray(self.body.query(X), dtype=np.float64)
        if self.face is None:
            return sigma
        v_f = self.face.flags(X)
        if not v_f.any():
            return sigma
        Xf = X[v_f]
        omega = fusion_weight(Xf, self.face.camera, self.face.transform, self.eroded, self.face.face_depth(),
                              self.beta)
        out = sigma.copy()
        out[v_f] = fuse(sigma[v_f], self.face.query(Xf, np.ones(len(Xf), bool)), omega)
        return out


# ---------------------------------------------------------------------------
# TSDF baseline
# ---------------------------------------------------------------------------
def tsdf_fuse(depths, cameras, bounds, resolution, trunc=0.03, chunk=65536):
    """Average truncated signed distances over views and convert to occupancy.

    Per view, a voxel in front of the measured surface or within ``trunc`` behind it
    contributes clamp((depth - z) / trunc, -1, 1). A voxel with no contribution is
    inside only when every view has it occluded; anything else is unknown or seen
    through, and both map to empty.
    """
    if len(depths) == 0 or len(depths) != len(cameras):
        raise ValueError("tsdf_fuse needs one camera per depth map and at least one view")
    res = _resolution(resolution)
    X = grid_points(bounds, res)
    out = np.empty(len(X), dtype=np.float32)
    for i in range(0, len(X), chunk):
        P = X[i:i + chunk]
        total = np.zeros(len(P))
        count = np.zeros(len(P))
        occluded = np.ones(len(P), dtype=bool)
        for depth, cam in zip(depths, cameras):
            uv, z, ok = cam.project(P)
            in_image = ok & (uv[:, 0] >= -0.5) & (uv[:, 0] <= cam.width - 0.5) & \
                (uv[:, 1] >= -0.5) & (uv[:, 1] <= cam.height - 0.5)
            d, valid = bilinear_sample(depth, uv)
            seen = in_image & valid
            sd = d - z
            near = seen & (sd >= -trunc)
            total += np.where(near, np.clip(sd / trunc, -1, 1), 0.0)
            count += near
            occluded &= seen & (sd < -trunc)
        tsdf = np.where(count > 0, total / np.maximum(count, 1), np.where(occluded, -1.0, 1.0))
        out[i:i + chunk] = np.clip(0.5 - 0.5 * tsdf, 0, 1)
    return OccupancyGrid(out.reshape(res), bounds)

"""Cameras, depth rasters, triangle meshes and the sampling/projection primitives on them.

Conventions: camera frame is right-handed with +z into the scene, +x right and
+y down in the image.  Integer pixel coordinates are pixel centers; ``uv`` is
(column, row).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

Z_MIN = 1e-6


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        M = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "world_to_cam", M)
        R = M[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-5 or np.linalg.det(R) <= 0:
            raise ValueError("world_to_cam rotation is not a proper rotation")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def R(self):
        return self.world_to_cam[:3, :3]

    @property
    def t(self):
        return self.world_to_cam[:3, 3]

    @property
    def center(self):
        return -self.R.T @ self.t

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        M = np.eye(4)
        M[:3, :3] = R
        M[:3, 3] = -R @ eye
        return cls(fx, fy, cx, cy, width, height, M)

    def to_camera(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.R.T + self.t

    def project(self, X):
        """World points [..., 3] -> (uv [..., 2], z [...], valid [...])."""
        Xc = self.to_camera(X)
        z = Xc[..., 2]
        valid = z > Z_MIN
        zs = np.where(valid, z, 1.0)
        u = self.fx * Xc[..., 0] / zs + self.cx
        v = self.fy * Xc[..., 1] / zs + self.cy
        return np.stack([u, v], axis=-1), z, valid

    def back_project(self, uv, z):
        """Pixel coordinates and camera depth -> world points."""
        uv = np.asarray(uv, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        Xc = np.stack([(uv[..., 0] - self.cx) / self.fx * z,
                       (uv[..., 1] - self.cy) / self.fy * z, z], axis=-1)
        return (Xc - self.t) @ self.R

    def pixel_grid(self):
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)

    def rays(self):
        """Per-pixel unit ray directions in world frame [H, W, 3] and the per-pixel
        factor converting ray length to camera depth."""
        uv = self.pixel_grid()
        d = np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy,
                      np.ones(uv.shape[:2])], axis=-1)
        norm = np.linalg.norm(d, axis=-1)
        dirs_c = d / norm[..., None]
        return dirs_c @ self.R, 1.0 / norm

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "world_to_cam": [float(v) for v in self.world_to_cam.ravel()]}

    @classmethod
    def from_json(cls, d):
        keys = {"fx", "fy", "cx", "cy", "width", "height", "world_to_cam"}
        if set(d) != keys:
            raise ValueError(f"camera JSON keys must be exactly {sorted(keys)}")
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]),
                   int(d["height"]), np.asarray(d["world_to_cam"], dtype=np.float64).reshape(4, 4))


def project(camera, X):
    return camera.project(X)


def back_project(camera, uv, z):
    return camera.back_project(uv, z)


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------
@dataclass
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValueError("depth values and validity mask must be matching 2-D arrays")
        v = self.values[self.valid]
        if not (np.isfinite(v).all() and (v > 0).all()):
            raise ValueError("valid depths must be finite and positive")
        self.values = np.where(self.valid, self.values, 0).astype(np.float32)

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float32)
        valid = np.isfinite(values) & (values > 0)
        return cls(np.where(valid, values, 0), valid)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def bilinear_weights(height, width, uv):
    """Four-neighbour indices [N, 4] (flat) and weights [N, 4] with border clamping."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u = np.clip(uv[:, 0], 0, width - 1)
    v = np.clip(uv[:, 1], 0, height - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    tu = u - u0
    tv = v - v0
    idx = np.stack([v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1], axis=1)
    w = np.stack([(1 - tu) * (1 - tv), tu * (1 - tv), (1 - tu) * tv, tu * tv], axis=1)
    return idx, w


def nearest_index(height, width, uv):
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u = np.clip(np.floor(uv[:, 0] + 0.5), 0, width - 1).astype(np.int64)
    v = np.clip(np.floor(uv[:, 1] + 0.5), 0, height - 1).astype(np.int64)
    return v * width + u


def depth_weights(depth, uv):
    """Bilinear weights renormalised over valid neighbours.

    Returns (idx [N, 4], w [N, 4], ok [N]); rows with four holes have ok=False and zero weights.
    """
    idx, w = bilinear_weights(depth.height, depth.width, uv)
    w = w * depth.valid.ravel()[idx]
    s = w.sum(axis=1)
    ok = s > 1e-12
    w = np.where(ok[:, None], w / np.where(ok, s, 1)[:, None], 0)
    return idx, w, ok


def bilinear_sample(raster, uv):
    """Sample a raster at pixel positions ``uv`` [..., 2].

    A DepthMap returns (values, ok) with hole-aware renormalisation; a plain
    array of shape [H, W] or [H, W, C] returns the interpolated values.
    """
    uv = np.asarray(uv, dtype=np.float64)
    lead = uv.shape[:-1]
    if isinstance(raster, DepthMap):
        idx, w, ok = depth_weights(raster, uv)
        vals = (raster.values.ravel().astype(np.float64)[idx] * w).sum(axis=1)
        return vals.reshape(lead), ok.reshape(lead)
    arr = np.asarray(raster, dtype=np.float64)
    H, W = arr.shape[:2]
    idx, w = bilinear_weights(H, W, uv)
    flat = arr.reshape(H * W, -1)
    out = (flat[idx] * w[..., None]).sum(axis=1)
    return out.reshape(lead + arr.shape[2:])


def camera_points(depth, camera):
    """Back-project every pixel into the camera frame [H, W, 3]."""
    uv = camera.pixel_grid()
    d = depth.values.astype(np.float64)
    return np.stack([(uv[..., 0] - camera.cx) / camera.fx * d,
                     (uv[..., 1] - camera.cy) / camera.fy * d, d], axis=-1)


def normals_from_depth(depth, camera):
    """Camera-frame unit normals [H, W, 3] (facing the camera) and a validity mask.

    Tangents are central differences of the back-projected points; any hole in the
    five-point stencil, or a pixel on the raster border, makes the normal invalid.
    """
    P = camera_points(depth, camera)
    H, W = depth.values.shape
    n = np.zeros((H, W, 3))
    ok = np.zeros((H, W), dtype=bool)
    if H < 3 or W < 3:
        return n, ok
    tu = P[1:-1, 2:] - P[1:-1, :-2]
    tv = P[2:, 1:-1] - P[:-2, 1:-1]
    c = np.cross(tv, tu)
    norm = np.linalg.norm(c, axis=-1)
    v = depth.valid
    stencil = v[1:-1, 1:-1] & v[1:-1, 2:] & v[1:-1, :-2] & v[2:, 1:-1] & v[:-2, 1:-1] & (norm > 1e-12)
    n[1:-1, 1:-1] = np.where(stencil[..., None], c / np.where(norm > 0, norm, 1)[..., None], 0)
    ok[1:-1, 1:-1] = stencil
    return n, ok


@dataclass
class View:
    """One RGBD observation: rgb [H, W, 3] in [0, 1], depth, mask [H, W] bool, camera."""

    rgb: np.ndarray
    depth: DepthMap
    mask: np.ndarray
    camera: Camera

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        shape = self.depth.values.shape
        if self.rgb.shape[:2] != shape or self.mask.shape != shape:
            raise ValueError("rgb, depth and mask rasters must share extents")
        if shape != (self.camera.height, self.camera.width):
            raise ValueError("raster extents do not match the camera")


@dataclass
class ViewTriplet:
    views: list

    def __post_init__(self):
        if not self.views:
            raise ValueError("at least one view is required")

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i):
        return self.views[i]


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------
@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    @property
    def empty(self):
        return len(self.faces) == 0

    def triangles(self):
        return self.vertices[self.faces]

    def face_areas(self):
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self):
        t = self.triangles()
        c = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(n > 0, n, 1)

    def vertex_normals(self):
        t = self.triangles()
        c = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], c)
        n = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.where(n > 0, n, 1)

    def degenerate_faces(self, tol=1e-12):
        return np.nonzero(self.face_areas() <= tol)[0]

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def signed_volume(self):
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def transformed(self, R, t):
        n = None if self.normals is None else self.normals @ np.asarray(R).T
        return Mesh(self.vertices @ np.asarray(R).T + t, self.faces.copy(), n)


def edge_counts(mesh):
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def watertight_defect(mesh):
    """None if every edge is shared by exactly two triangles, else a diagnostic string."""
    if mesh.empty:
        return "mesh has no faces"
    uniq, counts = edge_counts(mesh)
    bad = np.nonzero(counts != 2)[0]
    if len(bad) == 0:
        return None
    a, b = uniq[bad[0]]
    return f"{len(bad)} non-manifold/boundary edges, e.g. edge ({a}, {b}) used by {counts[bad[0]]} triangles"


def is_watertight(mesh):
    return watertight_defect(mesh) is None


def icosphere(subdivisions=4, radius=1.0, center=(0.0, 0.0, 0.0)):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t),
             (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    V = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    F = faces
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = V[a] + V[b]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        nf = []
        for a, b, c in F:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        F = nf
    return Mesh(np.array(V) * radius + np.asarray(center), np.array(F))


def box_mesh(half_extents=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)):
    h = np.asarray(half_extents, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    faces = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                      [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return Mesh(corners * h + np.asarray(center), faces)


def plane_mesh(size=1.0, n=1, z=0.0, tilt_deg=0.0):
    """Square grid of ``2 n^2`` triangles in the xy-plane at height z, tilted about the y axis."""
    g = np.linspace(-size / 2, size / 2, n + 1)
    X, Y = np.meshgrid(g, g, indexing="ij")
    V = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], axis=1)
    a = np.deg2rad(tilt_deg)
    R = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
    V = V @ R.T
    F = []
    for i in range(n):
        for j in range(n):
            p = i * (n + 1) + j
            F += [(p, p + n + 1, p + n + 2), (p, p + n + 2, p + 1)]
    return Mesh(V, np.array(F))


# ---------------------------------------------------------------------------
# point / triangle distance
# ---------------------------------------------------------------------------
def closest_point_on_triangles(P, A, B, C):
    """Closest points on triangles (A, B, C) to points P, all [N, 3] (Voronoi-region method)."""
    ab, ac, ap = B - A, C - A, P - A
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = P - B
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = P - C
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(P)
    done = np.zeros(len(P), dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        out[m] = value[m] if np.ndim(value) == 2 else value
        done[m] = True

    assign((d1 <= 0) & (d2 <= 0), A)
    assign((d3 >= 0) & (d4 <= d3), B)
    assign((d6 >= 0) & (d5 <= d6), C)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), A + v[:, None] * ab)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), A + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), B + w[:, None] * (C - B))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(len(P), dtype=bool), A + v[:, None] * ab + w[:, None] * ac)
    return out


def point_to_surface(point, mesh):
    """Exact distance from one point to a triangle mesh (brute force over all triangles)."""
    if mesh.empty:
        raise ValueError("point_to_surface: mesh has no triangles")
    t = mesh.triangles()
    P = np.broadcast_to(np.asarray(point, dtype=np.float64), (len(t), 3))
    q = closest_point_on_triangles(P, t[:, 0], t[:, 1], t[:, 2])
    return float(np.sqrt(((q - P) ** 2).sum(axis=1)).min())


class SurfaceQuery:
    """Exact nearest-surface queries against one mesh, pruned with a centroid KD-tree."""

    def __init__(self, mesh):
        if mesh.empty:
            raise ValueError("surface query on an empty mesh")
        self.mesh = mesh
        self.tri = mesh.triangles()
        self.centroids = self.tri.mean(axis=1)
        self.radius = np.sqrt(((self.tri - self.centroids[:, None]) ** 2).sum(-1)).max(axis=1)
        self.rmax = float(self.radius.max())
        self.tree = cKDTree(self.centroids)

    def query(self, points, k=8, chunk=4096):
        """Returns (distance [N], face index [N], closest point [N, 3])."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dist = np.empty(len(points))
        face = np.empty(len(points), dtype=np.int64)
        closest = np.empty_like(points)
        k = min(k, len(self.tri))
        for s in range(0, len(points), chunk):
            P = points[s:s + chunk]
            _, cand = self.tree.query(P, k=k)
            cand = np.asarray(cand).reshape(len(P), k)
            best_d, best_f, best_q = self._eval(P, cand)
            # any triangle closer than the current bound must have its centroid within d + rmax
            lists = self.tree.query_ball_point(P, best_d + self.rmax)
            lens = np.array([len(x) for x in lists])
            if lens.sum():
                rows = np.repeat(np.arange(len(P)), lens)
                faces = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists if len(x)])
                A, B, C = self.tri[faces, 0], self.tri[faces, 1], self.tri[faces, 2]
                q = closest_point_on_triangles(P[rows], A, B, C)
                d = np.sqrt(((q - P[rows]) ** 2).sum(axis=1))
                order = np.lexsort((faces, d, rows))
                rows, d, faces, q = rows[order], d[order], faces[order], q[order]
                first = np.r_[True, rows[1:] != rows[:-1]]
                r = rows[first]
                better = d[first] < best_d[r]
                best_d[r[better]] = d[first][better]
                best_f[r[better]] = faces[first][better]
                best_q[r[better]] = q[first][better]
            dist[s:s + chunk], face[s:s + chunk], closest[s:s + chunk] = best_d, best_f, best_q
        return dist, face, closest

    def _eval(self, P, cand):
        n, k = cand.shape
        rows = np.repeat(np.arange(n), k)
        faces = cand.ravel()
        q = closest_point_on_triangles(P[rows], self.tri[faces, 0], self.tri[faces, 1], self.tri[faces, 2])
        d = np.sqrt(((q - P[rows]) ** 2).sum(axis=1)).reshape(n, k)
        j = np.argmin(d, axis=1)
        sel = np.arange(n) * k + j
        return d[np.arange(n), j], faces[sel], q[sel]


def sample_surface(mesh, n, rng):
    """Area-uniform surface samples: (points [n, 3], face index [n])."""
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    cdf = np.cumsum(areas)
    f = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    f = np.minimum(f, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = mesh.triangles()[f]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return pts, f


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------
def save_obj(path, mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v %.9g %.9g %.9g\n" % tuple(v))
        if mesh.normals is not None:
            for n in mesh.normals:
                fh.write("vn %.9g %.9g %.9g\n" % tuple(n))
            for f in mesh.faces + 1:
                fh.write("f %d//%d %d//%d %d//%d\n" % (f[0], f[0], f[1], f[1], f[2], f[2]))
        else:
            for f in mesh.faces + 1:
                fh.write("f %d %d %d\n" % tuple(f))


def load_obj(path):
    V, N, F = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                V.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                N.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(V) + i for i in idx]
                for j in range(1, len(idx) - 1):
                    F.append([idx[0], idx[j], idx[j + 1]])
    normals = np.array(N) if len(N) == len(V) and N else None
    return Mesh(np.array(V).reshape(-1, 3), np.array(F, dtype=np.int64).reshape(-1, 3), normals)


def save_ply(path, mesh):
    has_n = mesh.normals is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}",
              "property float x", "property float y", "property float z"]
    if has_n:
        header += ["property float nx", "property float ny", "property float nz"]
    header += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    vert = mesh.vertices.astype("<f4")
    if has_n:
        vert = np.concatenate([vert, mesh.normals.astype("<f4")], axis=1)
    face = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    face["n"] = 3
    face["i"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(vert).tobytes())
        fh.write(face.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8", "uchar": "u1",
              "uint8": "u1", "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4"}


def load_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError("only binary little-endian PLY is supported")
    elements, cur = [], None
    for line in lines:
        p = line.split()
        if p[0] == "element":
            cur = {"name": p[1], "count": int(p[2]), "props": []}
            elements.append(cur)
        elif p[0] == "property":
            cur["props"].append(p[1:])
    pos = end
    V = F = N = None
    for el in elements:
        if el["name"] == "vertex":
            dt = np.dtype([(pr[-1], _PLY_TYPES[pr[0]]) for pr in el["props"]])
            arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=pos)
            pos += dt.itemsize * el["count"]
            V = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            if "nx" in dt.names:
                N = np.stack([arr["nx"], arr["ny"], arr["nz"]], axis=1).astype(np.float64)
        elif el["name"] == "face":
            _, ct, it, _ = el["props"][0]
            dt = np.dtype([("n", _PLY_TYPES[ct]), ("i", _PLY_TYPES[it], (3,))])
            arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=pos)
            if el["count"] and (arr["n"] != 3).any():
                raise ValueError("only triangle faces are supported")
            pos += dt.itemsize * el["count"]
            F = arr["i"].astype(np.int64)
    return Mesh(V, F if F is not None else np.zeros((0, 3), dtype=np.int64), N)


def save_mesh(path, mesh):
    path = str(path)
    if path.endswith(".ply"):
        save_ply(path, mesh)
    else:
        save_obj(path, mesh)


def load_mesh(path):
    path = str(path)
    return load_ply(path) if path.endswith(".ply") else load_obj(path)


def save_depth_png(path, depth):
    from PIL import Image

    mm = np.where(depth.valid, np.round(depth.values.astype(np.float64) * 1000.0), 0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def load_depth_png(path):
    from PIL import Image

    mm = np.array(Image.open(path)).astype(np.float64)
    return DepthMap(mm / 1000.0, mm > 0)


def save_depth_raw(path, depth):
    """float32 raster plus a ``.json`` sidecar; holes are stored as 0."""
    path = str(path)
    np.where(depth.valid, depth.values, 0).astype("<f4").tofile(path)
    with open(path + ".json", "w") as fh:
        json.dump({"width": depth.width, "height": depth.height, "units": "m"}, fh, sort_keys=True)


def load_depth_raw(path):
    path = str(path)
    with open(path + ".json") as fh:
        meta = json.load(fh)
    if meta.get("units") != "m":
        raise ValueError("raw depth sidecar must declare units 'm'")
    arr = np.fromfile(path, dtype="<f4").reshape(meta["height"], meta["width"])
    return DepthMap(arr, arr > 0)


def save_camera(path, camera):
    with open(path, "w") as fh:
        json.dump(camera.to_json(), fh, indent=1, sort_keys=True)


def load_camera(path):
    with open(path) as fh:
        return Camera.from_json(json.load(fh))


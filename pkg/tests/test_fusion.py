import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tspifu.capture import CropTransform, Rig, SceneSdf, Sphere, render_views
from tspifu.fusion import (
    FusedField, OccupancyGrid, erode_weights, evaluate_grid, fuse, fusion_weight, marching_cubes, tsdf_fuse,
)
from tspifu.geometry import Camera, DepthMap, is_watertight
from tspifu.implicit import AnalyticField

UNIT = np.array([[-1.0, -1, -1], [1, 1, 1]])


def sphere_grid(res, r=0.5, bounds=UNIT, soft=False):
    f = AnalyticField(lambda P: np.linalg.norm(P, axis=1) - r, k=200 if soft else None)
    return evaluate_grid(f, bounds, res)


def directed_edges_once(mesh):
    F = mesh.faces
    e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    return len(np.unique(e, axis=0)) == len(e)


class TestErode:
    def test_full_raster_interior(self):
        w = erode_weights(np.ones((20, 20), bool), 4)
        assert np.all(w[4:-4, 4:-4] == 1.0)

    def test_boundary_zero(self):
        m = np.zeros((20, 20), bool)
        m[5:15, 5:15] = True
        w = erode_weights(m, 4)
        assert np.all(w[5, 5:15] == 0) and np.all(w[5:15, 14] == 0)
        assert np.all(w[~m] == 0)

    def test_disk_radius_17(self):
        yy, xx = np.mgrid[:61, :61] - 30
        w = erode_weights(np.hypot(xx, yy) <= 20, 5)
        assert w[30, 30 + 17] == pytest.approx(0.6, abs=0.15)
        assert w[30 - 17, 30] == pytest.approx(0.6, abs=0.15)
        w_open = erode_weights(np.hypot(xx, yy) < 20, 5)
        assert w_open[30, 30 + 17] == pytest.approx(0.6, abs=0.15)

    def test_unit_width_is_hard_erosion(self):
        m = np.zeros((6, 6), bool)
        m[1:5, 1:5] = True
        w = erode_weights(m, 1)
        assert w.sum() == 4 and np.all(w[2:4, 2:4] == 1)

    def test_empty_mask_warns(self, caplog):
        assert np.all(erode_weights(np.zeros((4, 4), bool), 3) == 0)
        assert "empty mask" in caplog.text

    def test_width_validated(self):
        with pytest.raises(ValueError, match="at least 1"):
            erode_weights(np.ones((3, 3), bool), 0)

    @settings(max_examples=40, deadline=None)
    @given(m=arrays(bool, (12, 12)), w=st.integers(1, 6))
    def test_monotone_in_distance(self, m, w):
        from scipy import ndimage

        e = erode_weights(m, w)
        assert np.all((e >= 0) & (e <= 1))
        d = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1][m]
        order = np.argsort(d, kind="stable")
        assert np.all(np.diff(e[m][order]) >= 0)


def face_setup(eroded_value=1.0, hole=False):
    c = 15.5
    cam = Camera.look_at((0, 0, 2), (0, 0, 0), (0, 1, 0), 40.0, 40.0, c, c, 32, 32)
    t = CropTransform((8, 8, 24, 24), (16, 16))
    valid = np.ones((16, 16), bool)
    if hole:
        valid[6:10, 6:10] = False
    depth = DepthMap(np.full((16, 16), 2.0, np.float32), valid)
    eroded = np.full((16, 16), eroded_value)
    return cam, t, eroded, depth


def at(cam, z, uv=(15.5, 15.5)):
    return cam.back_project(np.array([uv]), np.array([z]))


class TestFusionWeight:
    def test_on_surface_interior(self):
        cam, t, e, d = face_setup()
        assert fusion_weight(at(cam, 2.0), cam, t, e, d)[0] == pytest.approx(1.0)

    def test_zero_eroded(self):
        cam, t, e, d = face_setup(eroded_value=0.0)
        assert fusion_weight(at(cam, 2.0), cam, t, e, d)[0] == 0.0

    def test_gaussian_at_5cm(self):
        cam, t, e, d = face_setup()
        w = fusion_weight(at(cam, 2.05), cam, t, e, d, beta=1e3)[0]
        assert w == pytest.approx(np.exp(-2.5), rel=1e-6)
        assert w == pytest.approx(0.0821, abs=5e-5)

    def test_hole_and_outside_zero(self):
        cam, t, e, d = face_setup(hole=True)
        assert fusion_weight(at(cam, 2.0), cam, t, e, d)[0] == 0.0
        assert fusion_weight(at(cam, 2.0, uv=(2.0, 2.0)), cam, t, e, d)[0] == 0.0


class TestFuse:
    def test_endpoints(self):
        assert fuse(0.2, 0.8, 0.0) == 0.2
        assert fuse(0.2, 0.8, 1.0) == 0.8

    def test_midpoint(self):
        assert fuse(0.2, 0.8, 0.5) == pytest.approx(0.5)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_convex(self, sb, sf, w):
        out = fuse(sb, sf, w)
        assert min(sb, sf) <= out <= max(sb, sf)


class FlagFace:
    """Face field stub: facial where x > 0, constant output."""

    def __init__(self, cam, t, d, value=0.9):
        self.camera, self.transform, self._d, self.value = cam, t, d, value

    def face_depth(self):
        return self._d

    def flags(self, X):
        return X[:, 0] > 0

    def query(self, X, v_f=None):
        return np.full(len(X), self.value)


class TestFusedField:
    def test_non_facial_bit_identical(self, rng):
        cam, t, e, d = face_setup()
        body = AnalyticField(lambda P: np.linalg.norm(P, axis=1) - 0.3, k=30)
        fused = FusedField(body, FlagFace(cam, t, d), e)
        X = rng.uniform(-0.5, 0.5, (500, 3))
        X[:, 0] = -np.abs(X[:, 0])
        assert np.array_equal(fused.query(X), body.query(X))

    def test_values_in_unit_interval(self, rng):
        cam, t, e, d = face_setup()
        body = AnalyticField(lambda P: np.linalg.norm(P, axis=1) - 0.3, k=30)
        out = FusedField(body, FlagFace(cam, t, d, 1.0), e).query(rng.uniform(-0.5, 0.5, (500, 3)))
        assert np.all((out >= 0) & (out <= 1))

    def test_no_face_is_body(self, rng):
        body = AnalyticField(lambda P: P[:, 2], k=10)
        X = rng.normal(size=(50, 3))
        assert np.array_equal(FusedField(body).query(X), body.query(X))


class TestEvaluateGrid:
    def test_chunking_bit_identical(self):
        f = AnalyticField(lambda P: np.linalg.norm(P, axis=1) - 0.5, k=25)
        a = evaluate_grid(f, UNIT, 17, chunk=65536)
        b = evaluate_grid(f, UNIT, 17, chunk=101)
        assert np.array_equal(a.values, b.values)

    def test_analytic_passthrough(self):
        f = AnalyticField(lambda P: np.linalg.norm(P, axis=1) - 0.5, k=25)
        g = evaluate_grid(f, UNIT, 64)
        X = np.stack(np.meshgrid(*g.axes(), indexing="ij"), -1).reshape(-1, 3)
        assert np.abs(g.values.reshape(-1) - f.query(X)).max() < 1e-7

    def test_resolution_validated(self):
        with pytest.raises(ValueError, match="at least 2"):
            evaluate_grid(AnalyticField(lambda P: P[:, 0]), UNIT, 1)

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            OccupancyGrid(np.full((2, 2, 2), 1.5, np.float32), UNIT)
        with pytest.raises(ValueError):
            OccupancyGrid(np.zeros((2, 2, 2), np.float32), np.array([[0, 0, 0], [0, 1, 1.0]]))

    def test_save_load_roundtrip(self, tmp_path, rng):
        g = OccupancyGrid(rng.random((3, 4, 5)).astype(np.float32), np.array([[0, 0, 0], [1, 2, 3.0]]))
        g.save(tmp_path / "g.raw")
        h = OccupancyGrid.load(tmp_path / "g.raw")
        assert np.array_equal(g.values, h.values)
        assert np.array_equal(g.bounds, h.bounds)


class TestMarchingCubes:
    def test_sphere_radius_and_watertight(self):
        g = sphere_grid(64)
        m = marching_cubes(g)
        vs = g.voxel_size[0]
        assert np.abs(np.linalg.norm(m.vertices, axis=1) - 0.5).mean() < vs
        assert is_watertight(m)
        assert directed_edges_once(m)
        assert m.signed_volume() > 0

    def test_soft_sphere_volume(self):
        m = marching_cubes(sphere_grid(48, soft=True))
        assert m.signed_volume() == pytest.approx(4 / 3 * np.pi * 0.5 ** 3, rel=0.02)

    @pytest.mark.parametrize("fill", [0.0, 1.0])
    def test_uniform_grid_empty(self, fill):
        m = marching_cubes(OccupancyGrid(np.full((5, 5, 5), fill, np.float32), UNIT))
        assert m.empty

    @settings(max_examples=40, deadline=None)
    @given(v=arrays(np.float32, (6, 5, 7), elements=st.floats(0, 1, width=32)))
    def test_random_field_closed_and_oriented(self, v):
        v = v.copy()
        v[[0, -1]] = 0
        v[:, [0, -1]] = 0
        v[:, :, [0, -1]] = 0
        m = marching_cubes(OccupancyGrid(v, UNIT))
        if m.empty:
            return
        assert is_watertight(m)
        assert directed_edges_once(m)
        assert m.signed_volume() > 0

    def test_translation_invariant(self):
        g = sphere_grid(24, r=0.6, soft=True)
        shift = np.array([3.0, -2.0, 0.5])
        a = marching_cubes(g)
        b = marching_cubes(OccupancyGrid(g.values, g.bounds + shift))
        assert np.array_equal(a.faces, b.faces)
        np.testing.assert_allclose(b.vertices - shift, a.vertices, atol=1e-9)

    def test_linear_interpolation(self):
        v = np.zeros((2, 2, 2), np.float32)
        v[0] = 1.0
        v[1] = 0.25
        m = marching_cubes(OccupancyGrid(v, np.array([[0, 0, 0], [2, 2, 2.0]])))
        # centres at 0.5 and 1.5; value 0.5 is 2/3 of the way along
        np.testing.assert_allclose(m.vertices[:, 0], 0.5 + 2 / 3)


class TestTsdf:
    def test_plane_within_half_voxel(self):
        c = 31.5
        cam = Camera.look_at((0, 0, 1.0), (0, 0, 0), (0, 1, 0), 60.0, 60.0, c, c, 64, 64)
        depth = DepthMap(np.full((64, 64), 1.0, np.float32), np.ones((64, 64), bool))
        bounds = np.array([[-0.2, -0.2, -0.2], [0.2, 0.2, 0.2]])
        g = tsdf_fuse([depth], [cam], bounds, 40, trunc=0.03)
        m = marching_cubes(g)
        central = np.all(np.abs(m.vertices[:, :2]) < 0.1, axis=1)
        assert central.sum() > 50
        assert np.abs(m.vertices[central, 2]).max() < 0.5 * g.voxel_size[2]

    def test_sphere_on_rig(self):
        scene = SceneSdf(Sphere((0, 0, 0), 0.3))
        views = render_views(scene, Rig(image_size=64).cameras())
        bounds = np.array([[-0.4] * 3, [0.4] * 3])
        g = tsdf_fuse([v.depth for v in views], [v.camera for v in views], bounds, 64, trunc=0.0375)
        m = marching_cubes(g)
        assert np.abs(np.linalg.norm(m.vertices, axis=1) - 0.3).mean() < g.voxel_size[0]
        assert is_watertight(m)

    def test_all_holes_empty(self):
        cam = Rig(image_size=16).cameras()[0]
        depth = DepthMap(np.zeros((16, 16), np.float32), np.zeros((16, 16), bool))
        assert marching_cubes(tsdf_fuse([depth], [cam], UNIT, 8)).empty

    def test_needs_views(self):
        with pytest.raises(ValueError, match="at least one view"):
            tsdf_fuse([], [], UNIT, 8)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tspifu.capture import CropTransform
from tspifu.fusion import OccupancyGrid, grid_points
from tspifu.geometry import Camera, DepthMap, ViewTriplet
from tspifu.implicit import (
    AnalyticField, BodyAssembly, BodyConfig, BodyModel, FaceAssembly, FaceConfig, FaceModel, GridField,
    LinearField, field_normal, psdf_feature, sigmoid,
)
from tspifu.tensor.autograd import Tensor, no_grad
from tspifu.tensor.nn import SkipMLP


def front_camera(size=32, f=40.0, dist=2.0):
    c = (size - 1) / 2
    return Camera.look_at((0, 0, dist), (0, 0, 0), (0, 1, 0), f, f, c, c, size, size)


def flat_depth(value=2.0, size=32, hole=None):
    valid = np.ones((size, size), bool)
    if hole is not None:
        valid[hole] = False
    return DepthMap(np.full((size, size), value, np.float32), valid)


def on_axis(z_cam, dist=2.0):
    """World point on the optical axis of front_camera at camera depth z_cam."""
    return np.array([[0.0, 0.0, dist - z_cam]])


class TestPsdf:
    def test_on_surface_zero(self):
        f = psdf_feature(on_axis(2.0), front_camera(), flat_depth())
        assert f.p[0] == pytest.approx(0.0, abs=1e-7)
        assert not f.hole[0] and f.valid[0]

    def test_behind_clamped(self):
        assert psdf_feature(on_axis(2.05), front_camera(), flat_depth()).p[0] == pytest.approx(0.01)

    def test_in_front(self):
        assert psdf_feature(on_axis(1.997), front_camera(), flat_depth()).p[0] == pytest.approx(-0.003, abs=1e-6)

    def test_hole_reads_as_empty(self):
        f = psdf_feature(on_axis(2.05), front_camera(), flat_depth(hole=(slice(12, 20), slice(12, 20))))
        assert f.hole[0]
        assert f.p[0] == -f.delta_p

    def test_behind_camera_invalid(self):
        f = psdf_feature(np.array([[0.0, 0.0, 3.0]]), front_camera(), flat_depth())
        assert not f.valid[0]

    @settings(max_examples=50, deadline=None)
    @given(z=st.lists(st.floats(0.5, 3.5), min_size=2, max_size=20), dp=st.floats(0.001, 0.1))
    def test_clamped_and_monotone(self, z, dp):
        z = np.sort(np.asarray(z))
        X = np.concatenate([on_axis(v) for v in z])
        p = psdf_feature(X, front_camera(), flat_depth(), delta_p=dp).p
        assert np.all(np.abs(p) <= dp)
        assert np.all(np.diff(p) >= -1e-12)


class TestAdapters:
    def test_analytic_closed_form(self, rng):
        X = rng.uniform(-1, 1, (1000, 3))
        got = AnalyticField(lambda P: np.linalg.norm(P, axis=1) - 0.5, k=40).query(X)
        expect = 1 / (1 + np.exp(40 * (np.linalg.norm(X, axis=1) - 0.5)))
        assert np.abs(got - expect).max() < 1e-7

    def test_hard_indicator(self):
        f = AnalyticField(lambda P: np.linalg.norm(P, axis=1) - 0.5)
        assert f.query(np.array([[0.0, 0, 0], [1, 0, 0]])).tolist() == [1.0, 0.0]

    def test_grid_reproduces_nodes(self, rng):
        bounds = ((-1, -1, -1), (1, 1, 1))
        values = rng.random((6, 5, 4)).astype(np.float32)
        grid = OccupancyGrid(values, np.array(bounds, float))
        X = np.stack(np.meshgrid(*grid.axes(), indexing="ij"), axis=-1).reshape(-1, 3)
        assert np.array_equal(GridField(grid).query(X), values.reshape(-1).astype(np.float64))

    def test_grid_zero_outside(self):
        grid = OccupancyGrid(np.ones((3, 3, 3), np.float32), np.array([[0, 0, 0], [1, 1, 1]], float))
        assert GridField(grid).query(np.array([[5.0, 5, 5]]))[0] == 0

    @settings(max_examples=30, deadline=None)
    @given(x=st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_query_in_unit_interval(self, x):
        X = np.array([x])
        for f in (LinearField((1, 2, 3), 0.5), AnalyticField(lambda P: P[:, 0], k=5)):
            v = f.query(X)
            assert np.all((v >= 0) & (v <= 1))


class CoordMLP:
    """Occupancy field from a SkipMLP on raw coordinates."""

    def __init__(self, seed):
        self.mlp = SkipMLP(3, (64, 32), (32, 32), np.random.default_rng(seed))

    def query(self, X):
        with no_grad():
            return self.mlp(Tensor(np.asarray(X, dtype=np.float64))).data.astype(np.float64)

    def pattern(self, X):
        """Signs of every hidden pre-activation, [N, units]."""
        x = np.asarray(X, dtype=np.float64)
        h, signs = x, []
        for group, first in ((self.mlp.reduce, None), (self.mlp.query, x)):
            if first is not None:
                h = np.concatenate([h, first], axis=-1)
            for layer in group:
                pre = h @ layer.W.data + layer.b.data
                signs.append(pre > 0)
                h = np.where(pre > 0, pre, 0.01 * pre)
        return np.concatenate(signs, axis=-1)


class TestFieldNormal:
    def test_linear_field(self, rng):
        a = np.array([0.3, -0.2, 0.5])
        X = rng.uniform(-0.1, 0.1, (50, 3))
        n, ok = field_normal(LinearField(a, 0.5), X)
        assert ok.all()
        np.testing.assert_allclose(n, np.broadcast_to(a / np.linalg.norm(a), n.shape), atol=1e-9)

    def test_radial_outward(self):
        r = 0.5
        f = AnalyticField(lambda P: np.linalg.norm(P, axis=1) - r, k=50)
        n, ok = field_normal(f, np.array([[r, 0, 0]]), outward=True)
        assert ok[0]
        np.testing.assert_allclose(n[0], [1, 0, 0], atol=1e-3)
        n_in, _ = field_normal(f, np.array([[r, 0, 0]]))
        np.testing.assert_allclose(n_in[0], [-1, 0, 0], atol=1e-3)

    def test_mlp_normal_converges_between_hinges(self):
        # leaky-ReLU MLPs are piecewise linear; where the stencil stays on one linear
        # piece, the normal at h and h/2 must agree
        f = CoordMLP(0)
        X = np.random.default_rng(0).uniform(-0.5, 0.5, (400, 3))
        h = 0.002
        stencil = [X + s * e for e in np.eye(3) * h for s in (1, -1)]
        ref = f.pattern(X)
        clean = np.all([np.all(f.pattern(P) == ref, axis=1) for P in stencil], axis=0)
        assert clean.sum() > 100
        a, _ = field_normal(f, X[clean], h=h)
        b, _ = field_normal(f, X[clean], h=h / 2)
        ang = np.degrees(np.arccos(np.clip((a * b).sum(axis=1), -1, 1)))
        assert ang.max() < 5

    def test_flat_region_degenerate(self):
        n, ok = field_normal(LinearField((0, 0, 0), 0.3), np.zeros((2, 3)))
        assert not ok.any()
        assert np.all(n == 0)


@pytest.fixture(scope="module")
def body(small_views):
    return BodyAssembly(BodyModel(BodyConfig.toy(), seed=0), small_views)


class TestBody:
    def test_fresh_output_open_interval(self, body, rng):
        X = rng.uniform(-0.5, 0.5, (4000, 3))
        s = body.query(X)
        assert np.isfinite(s).all()
        assert np.all((s > 0) & (s < 1))

    def test_repeat_bit_identical(self, body, rng):
        X = rng.uniform(-0.5, 0.5, (300, 3))
        assert np.array_equal(body.query(X), body.query(X))

    def test_chunking_bit_identical(self, body, rng):
        X = rng.uniform(-0.5, 0.5, (300, 3))
        a = body.query(X)
        old = body.chunk
        body.chunk = 37
        try:
            assert np.array_equal(a, body.query(X))
        finally:
            body.chunk = old

    def test_threads_bit_identical(self, body, rng, monkeypatch):
        X = rng.uniform(-0.5, 0.5, (300, 3))
        a = body.query(X)
        old = body.chunk
        body.chunk = 50
        monkeypatch.setenv("TSPIFU_THREADS", "3")
        try:
            assert np.array_equal(a, body.query(X))
        finally:
            body.chunk = old

    def test_view_order_invariant(self, body, small_views, rng):
        X = rng.uniform(-0.3, 0.3, (200, 3))
        perm = BodyAssembly(body.model, ViewTriplet([small_views.views[i] for i in (2, 0, 1)]))
        assert np.abs(body.query(X) - perm.query(X)).max() < 1e-5

    def test_invalid_in_every_view_is_zero(self, small_views):
        one = BodyAssembly(BodyModel(BodyConfig.toy(), seed=0), ViewTriplet(small_views.views[:1]))
        cam = small_views.views[0].camera
        behind = cam.back_project(np.array([[16.0, 16.0]]), np.array([-1.0]))
        assert one.query(behind)[0] == 0.0

    def test_config_roundtrip(self):
        cfg = BodyConfig.toy()
        assert BodyConfig.from_json(cfg.to_json()) == cfg


class TestFace:
    @pytest.fixture(scope="class")
    @staticmethod
    def face():
        cam = front_camera(size=32)
        t = CropTransform((8, 8, 16, 16), (32, 32))
        mask = np.ones((32, 32), bool)
        rgb = np.full((32, 32, 3), 0.5, np.float32)
        return FaceAssembly(FaceModel(FaceConfig.toy(), seed=0), cam, t, rgb, np.full((32, 32), 2.0), mask)

    def test_fresh_output_open_interval(self, face, rng):
        uv = rng.uniform(8, 15, (200, 2))
        X = face.camera.back_project(uv, 2.0 + rng.uniform(-0.05, 0.05, 200))
        s = face.query(X)
        assert np.all((s > 0) & (s < 1))

    def test_rejects_non_facial_points(self, face):
        X = face.camera.back_project(np.array([[2.0, 2.0]]), np.array([2.0]))
        with pytest.raises(ValueError, match="facial flag"):
            face.query(X)
        with pytest.raises(ValueError, match="facial flag"):
            face.query(np.zeros((1, 3)) + [0, 0, 0], v_f=np.array([False]))

    def test_sigmoid_stable(self):
        assert np.all(np.isfinite(sigmoid(np.array([-1e4, 0, 1e4]))))
        assert sigmoid(np.array([0.0]))[0] == 0.5


def test_grid_points_are_voxel_centres():
    P = grid_points(((0, 0, 0), (1, 1, 1)), 2)
    assert sorted(set(P[:, 0].tolist())) == [0.25, 0.75]

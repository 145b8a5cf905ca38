import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tspifu.geometry import (
    Camera, DepthMap, Mesh, SurfaceQuery, back_project, bilinear_sample, box_mesh, icosphere,
    is_watertight, load_camera, load_depth_png, load_depth_raw, load_mesh, normals_from_depth,
    point_to_surface, project, sample_surface, save_camera, save_depth_png,
    save_depth_raw, save_mesh, watertight_defect,
)


def simple_camera(f=100.0, c=50.0, size=101):
    return Camera(f, f, c, c, size, size, np.eye(4))


def rot_y(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])


class TestCamera:
    def test_principal_ray(self):
        uv, z, ok = project(simple_camera(), np.array([[0.0, 0, 1]]))
        assert np.allclose(uv, [[50, 50]]) and np.allclose(z, 1.0) and ok.all()

    def test_similar_triangles(self):
        uv, z, _ = project(simple_camera(), np.array([[0.5, 0, 1]]))
        assert np.allclose(uv, [[100, 50]]) and np.allclose(z, 1.0)

    def test_behind_camera_is_flagged(self):
        _, _, ok = project(simple_camera(), np.array([[0, 0, -1.0], [0, 0, 0.0]]))
        assert not ok.any()

    def test_round_trip_random_points(self):
        rng = np.random.default_rng(0)
        cam = Camera.look_at((0.3, 0.2, 2.5), (0, 0, 0), (0, 1, 0), 300, 300, 255.5, 255.5, 512, 512)
        X = rng.uniform(-0.5, 0.5, (1000, 3))
        uv, z, ok = cam.project(X)
        assert ok.all()
        assert np.abs(back_project(cam, uv, z) - X).max() < 1e-6

    def test_rejects_non_rotation(self):
        M = np.eye(4)
        M[0, 0] = 2
        with pytest.raises(ValueError):
            Camera(1, 1, 0, 0, 4, 4, M)

    def test_rejects_bad_principal_point(self):
        with pytest.raises(ValueError):
            Camera(1, 1, 10, 0, 4, 4, np.eye(4))

    def test_json_round_trip(self, tmp_path):
        cam = Camera.look_at((1, 0.5, 2), (0, 0, 0), (0, 1, 0), 200, 210, 63.5, 60, 128, 120)
        save_camera(tmp_path / "c.json", cam)
        back = load_camera(tmp_path / "c.json")
        assert np.array_equal(back.world_to_cam, cam.world_to_cam) and back.fx == cam.fx

    def test_json_rejects_unknown_keys(self):
        d = simple_camera().to_json()
        d["skew"] = 0
        with pytest.raises(ValueError):
            Camera.from_json(d)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-180, 180), st.floats(-0.4, 0.4), st.floats(-0.4, 0.4))
    def test_round_trip_property(self, az, x, y):
        a = np.deg2rad(az)
        cam = Camera.look_at((2 * np.sin(a), 0.1, 2 * np.cos(a)), (0, 0, 0), (0, 1, 0), 100, 100, 50, 50, 101, 101)
        X = np.array([[x, y, 0.1]])
        uv, z, ok = cam.project(X)
        assert ok.all()
        assert np.abs(cam.back_project(uv, z) - X).max() < 1e-6


class TestBilinear:
    def test_constant(self):
        r = np.full((4, 5), 3.5)
        assert np.allclose(bilinear_sample(r, np.array([[1.3, 2.7], [-4, 10]])), 3.5)

    def test_ramp(self):
        assert np.isclose(bilinear_sample(np.array([[0.0, 1.0]]), np.array([0.25, 0.0])), 0.25)

    def test_exact_at_centers(self):
        r = np.arange(12.0).reshape(3, 4)
        vv, uu = np.mgrid[0:3, 0:4]
        assert np.array_equal(bilinear_sample(r, np.stack([uu, vv], -1)), r)

    def test_hole_renormalisation(self):
        vals = np.array([[1.0, 2.0], [3.0, 4.0]])
        valid = np.array([[True, False], [True, True]])
        v, ok = bilinear_sample(DepthMap(vals, valid), np.array([[0.3, 0.6]]))
        w = np.array([0.7 * 0.4, 0.3 * 0.4, 0.7 * 0.6, 0.3 * 0.6])
        w[1] = 0
        expect = (w * [1, 2, 3, 4]).sum() / w.sum()
        assert ok[0] and abs(v[0] - expect) < 1e-6

    def test_all_holes_invalid(self):
        d = DepthMap(np.zeros((2, 2)), np.zeros((2, 2), bool))
        _, ok = bilinear_sample(d, np.array([[0.5, 0.5]]))
        assert not ok[0]

    def test_border_clamp(self):
        r = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.isclose(bilinear_sample(r, np.array([-3.0, -3.0])), 1.0)
        assert np.isclose(bilinear_sample(r, np.array([5.0, 5.0])), 4.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone_between_neighbours(self, a, b):
        r = np.array([[0.0, 1.0, 5.0]])
        lo, hi = sorted((a, b))
        assert bilinear_sample(r, np.array([lo, 0.0])) <= bilinear_sample(r, np.array([hi, 0.0])) + 1e-12


class TestNormals:
    def test_fronto_parallel(self):
        cam = simple_camera(size=21, c=10)
        n, ok = normals_from_depth(DepthMap.from_array(np.full((21, 21), 2.0)), cam)
        assert ok[1:-1, 1:-1].all() and not ok[0].any()
        assert np.allclose(n[ok], [0, 0, -1])

    def test_tilted_plane(self):
        size, f = 65, 80.0
        cam = Camera(f, f, 32, 32, size, size, np.eye(4))
        nrm = rot_y(45) @ np.array([0, 0, -1.0])  # plane normal, facing the camera
        p0 = np.array([0, 0, 2.0])
        vv, uu = np.mgrid[0:size, 0:size]
        ray = np.stack([(uu - 32) / f, (vv - 32) / f, np.ones_like(uu, float)], -1)
        t = (p0 @ nrm) / (ray @ nrm)
        n, ok = normals_from_depth(DepthMap.from_array(t), cam)
        ang = np.degrees(np.arccos(np.clip(n[ok] @ nrm, -1, 1)))
        assert ok.sum() > 0 and ang.max() < 0.5
        assert np.allclose(np.linalg.norm(n[ok], axis=1), 1, atol=1e-5)

    def test_hole_propagates(self):
        d = np.full((7, 7), 2.0)
        d[3, 4] = 0
        n, ok = normals_from_depth(DepthMap.from_array(d), simple_camera(size=7, c=3))
        assert not ok[3, 3] and not ok[3, 4] and ok[1, 1]


class TestMeshDistance:
    def test_vertex_is_zero(self):
        m = icosphere(2)
        assert point_to_surface(m.vertices[5], m) < 1e-12

    def test_face_region(self):
        m = Mesh(np.array([[-10.0, -10, 0], [10, -10, 0], [0, 10, 0]]), np.array([[0, 1, 2]]))
        c = m.vertices.mean(0)
        assert np.isclose(point_to_surface(c + [0, 0, 0.37], m), 0.37)

    def test_empty_mesh_rejected(self):
        with pytest.raises(ValueError):
            point_to_surface(np.zeros(3), Mesh(np.zeros((0, 3)), np.zeros((0, 3), int)))

    def test_against_dense_sampling(self):
        rng = np.random.default_rng(1)
        m = box_mesh((0.15, 0.1, 0.12))
        dense, _ = sample_surface(m, 2_000_000, rng)
        P = rng.uniform(-0.3, 0.3, (100, 3))
        from scipy.spatial import cKDTree

        brute = cKDTree(dense).query(P)[0]
        exact = np.array([point_to_surface(p, m) for p in P])
        assert np.all(exact <= brute + 1e-12)
        assert np.abs(exact - brute).max() < 1e-3

    def test_surface_query_matches_brute_force(self):
        rng = np.random.default_rng(2)
        m = icosphere(3, 0.5)
        P = rng.uniform(-1, 1, (300, 3))
        d, _, cp = SurfaceQuery(m).query(P)
        brute = np.array([point_to_surface(p, m) for p in P])
        assert np.abs(d - brute).max() < 1e-12
        assert np.allclose(np.linalg.norm(cp - P, axis=1), d)

    def test_rigid_invariance(self):
        rng = np.random.default_rng(3)
        m = icosphere(2, 0.4)
        P = rng.uniform(-1, 1, (20, 3))
        R, t = rot_y(33) @ rot_y(0), np.array([0.2, -1.0, 3.0])
        m2 = m.transformed(R, t)
        for p in P:
            assert abs(point_to_surface(p, m) - point_to_surface(R @ p + t, m2)) < 1e-9


class TestMeshTopology:
    def test_primitives_watertight_and_outward(self):
        for m in (icosphere(3), box_mesh()):
            assert is_watertight(m)
            assert m.signed_volume() > 0
            assert len(m.degenerate_faces()) == 0

    def test_open_mesh_defect_names_edge(self):
        m = icosphere(1)
        broken = Mesh(m.vertices, m.faces[1:])
        assert not is_watertight(broken)
        assert "edge" in watertight_defect(broken)

    def test_sphere_volume(self):
        assert abs(icosphere(4, 1.0).signed_volume() - 4 / 3 * np.pi) < 0.02


class TestIO:
    @pytest.mark.parametrize("ext", ["obj", "ply"])
    def test_mesh_round_trip(self, tmp_path, ext):
        m = icosphere(2, 0.7)
        m = Mesh(m.vertices, m.faces, m.vertex_normals())
        save_mesh(tmp_path / f"m.{ext}", m)
        back = load_mesh(tmp_path / f"m.{ext}")
        assert np.array_equal(back.faces, m.faces)
        assert np.allclose(back.vertices, m.vertices, atol=1e-6)
        assert back.normals is not None and np.allclose(back.normals, m.normals, atol=1e-6)

    def test_depth_png_round_trip(self, tmp_path):
        d = np.array([[1.234, 0.0], [2.5, 0.001]])
        save_depth_png(tmp_path / "d.png", DepthMap.from_array(d))
        back = load_depth_png(tmp_path / "d.png")
        assert np.array_equal(back.valid, d > 0)
        assert np.abs(back.values[d > 0] - d[d > 0]).max() <= 0.0005

    def test_depth_raw_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        d = DepthMap.from_array(rng.uniform(0.5, 3, (5, 7)).astype(np.float32))
        save_depth_raw(tmp_path / "d.f32", d)
        back = load_depth_raw(tmp_path / "d.f32")
        assert np.array_equal(back.values, d.values)

import numpy as np

from stillflow import (
    CameraIntrinsics,
    build_mesh,
    lift_flow,
    project_velocity,
    rasterize_surface_motion,
)
from stillflow.mesh import project
from stillflow.motion import bilinear_sample
from stillflow.scene_io import MotionField

from conftest import smooth_depth

K = CameraIntrinsics(fx=32.0, fy=32.0, cx=32.0, cy=32.0)


def flat_scene(h=64, w=64, depth_val=2.0):
    depth = np.full((h, w), depth_val, dtype=np.float32)
    mesh = build_mesh(depth, np.ones((h, w), bool), K, stride=4)
    return mesh


def field_of(h, w, fn):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    vx, vy = fn(xx, yy)
    data = np.stack([np.broadcast_to(vx, (h, w)), np.broadcast_to(vy, (h, w))], axis=-1)
    return MotionField(data=data.astype(np.float64), valid_mask=np.ones((h, w), bool))


class TestProjectVelocity:
    def test_zero(self):
        assert np.allclose(project_velocity([0, 0, 0], [0.3, -0.2, 2.0], K), 0.0)

    def test_axis_case(self):
        out = project_velocity([0.7, 0.0, 0.0], [0.0, 0.0, 2.0], K)
        assert np.allclose(out, [K.fx * 0.7 / 2.0, 0.0])

    def test_radial_motion_invisible(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            p = rng.uniform([-1, -1, 1], [1, 1, 4])
            s = rng.uniform(-2, 2)
            out = project_velocity(p * s, p, K)
            assert np.allclose(out, 0.0, atol=1e-9)


class TestLiftFlow:
    def test_zero_flow(self):
        mesh = flat_scene()
        faces = lift_flow(field_of(64, 64, lambda x, y: (0.0, 0.0)), mesh, K)
        assert np.allclose(faces.w, 0.0)

    def test_fronto_parallel_closed_form(self):
        z = 2.0
        mesh = flat_scene(depth_val=z)
        du = 1.5
        faces = lift_flow(field_of(64, 64, lambda x, y: (du, 0.0)), mesh, K)
        expect = np.array([du * z / K.fx, 0.0, 0.0])
        assert np.allclose(faces.w, expect, atol=1e-12)

    def test_round_trip_random_mesh(self):
        depth = smooth_depth(48, 48, base=2.0, amplitude=0.25, seed=19)
        mesh = build_mesh(depth, np.ones((48, 48), bool), K, stride=3)
        f = field_of(48, 48, lambda x, y: (np.sin(x / 9) + 0.5, np.cos(y / 7)))
        faces = lift_flow(f, mesh, K)
        ok = ~faces.degenerate
        reproj = project_velocity(faces.w[ok], mesh.centroids[ok], K)
        uv = project(mesh.centroids[ok], K)
        sampled = bilinear_sample(f.data, uv[:, 0], uv[:, 1])
        err = np.linalg.norm(reproj - sampled, axis=1)
        scale = np.maximum(np.linalg.norm(sampled, axis=1), 1e-12)
        assert np.max(err / scale) < 1e-6

    def test_tangential(self):
        depth = smooth_depth(32, 32, seed=23)
        mesh = build_mesh(depth, np.ones((32, 32), bool), K, stride=2)
        faces = lift_flow(field_of(32, 32, lambda x, y: (1.0, -0.5)), mesh, K)
        wn = np.abs(np.einsum("ij,ij->i", faces.w, mesh.normals))
        assert np.all(wn <= 1e-9 * np.maximum(np.linalg.norm(faces.w, axis=1), 1e-30))

    def test_linearity(self):
        depth = smooth_depth(32, 32, seed=29)
        mesh = build_mesh(depth, np.ones((32, 32), bool), K, stride=2)
        f1 = field_of(32, 32, lambda x, y: (np.sin(x / 5), np.cos(y / 6)))
        f3 = MotionField(data=3.0 * f1.data, valid_mask=f1.valid_mask)
        a = lift_flow(f1, mesh, K)
        b = lift_flow(f3, mesh, K)
        assert np.allclose(b.w, 3.0 * a.w, atol=1e-12)


class TestRasterize:
    def test_zero_motion(self):
        mesh = flat_scene()
        faces = lift_flow(field_of(64, 64, lambda x, y: (0.0, 0.0)), mesh, K)
        out = rasterize_surface_motion(faces, mesh, K, (64, 64))
        assert np.allclose(out.data, 0.0)

    def test_uniform_closed_form(self):
        z = 2.0
        mesh = flat_scene(depth_val=z)
        du = 1.5
        faces = lift_flow(field_of(64, 64, lambda x, y: (du, 0.0)), mesh, K)
        out = rasterize_surface_motion(faces, mesh, K, (64, 64))
        cov = out.valid_mask
        assert cov.sum() > 0.5 * 64 * 64
        assert np.allclose(out.data[cov][:, 0], du, atol=1e-9)
        assert np.allclose(out.data[cov][:, 1], 0.0, atol=1e-9)

    def test_round_trip_smooth_field(self):
        h = w = 64
        depth = smooth_depth(h, w, base=2.0, amplitude=0.1, seed=31)
        mesh = build_mesh(depth, np.ones((h, w), bool), K, stride=2)
        f = field_of(h, w, lambda x, y: (1.0 + 0.3 * np.sin(x / 16), 0.4 * np.cos(y / 16)))
        faces = lift_flow(f, mesh, K)
        out = rasterize_surface_motion(faces, mesh, K, (h, w))
        interior = np.zeros((h, w), bool)
        interior[8:-8, 8:-8] = True
        m = interior & out.valid_mask
        err = np.linalg.norm(out.data[m] - f.data[m], axis=1)
        assert err.max() <= 0.1

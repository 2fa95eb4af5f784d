import numpy as np
import pytest

from stillflow import NoHints, densify_hints, integrate_euler, invert_displacement
from stillflow.motion import advance_positions, bilinear_sample
from stillflow.scene_io import MotionField, SparseHint


def hint(u, v, vx, vy):
    return SparseHint(u=u, v=v, vx=vx, vy=vy)


def const_field(h, w, vx, vy):
    data = np.zeros((h, w, 2))
    data[..., 0] = vx
    data[..., 1] = vy
    return MotionField(data=data, valid_mask=np.ones((h, w), bool))


class TestDensify:
    def test_single_hint_constancy(self):
        mask = np.ones((20, 30), dtype=bool)
        out = densify_hints([hint(25, 3, 3.0, 0.0)], mask, sigma=2.0)
        assert np.all(out.data[..., 0] == 3.0)
        assert np.all(out.data[..., 1] == 0.0)

    def test_two_hint_symmetry(self):
        mask = np.ones((40, 40), dtype=bool)
        hints = [hint(10, 20, 2.0, 0.0), hint(30, 20, 0.0, 2.0)]
        out = densify_hints(hints, mask, sigma=8.0)
        assert np.allclose(out.data[20, 20], [1.0, 1.0], atol=1e-12)

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(8)
        mask = rng.random((64, 64)) > 0.3
        hints = [
            hint(rng.uniform(0, 63), rng.uniform(0, 63), *rng.normal(0, 2, 2))
            for _ in range(5)
        ]
        sigma = 6.4
        out = densify_hints(hints, mask, sigma=sigma)
        # oracle: direct per-pixel double loop over the raster and the hints
        for i in range(64):
            for j in range(64):
                if not mask[i, j]:
                    assert np.all(out.data[i, j] == 0)
                    continue
                num = np.zeros(2)
                den = 0.0
                for k in hints:
                    d2 = (j - k.u) ** 2 + (i - k.v) ** 2
                    w = np.exp(-d2 / sigma**2)
                    num += w * np.array([k.vx, k.vy])
                    den += w
                assert np.allclose(out.data[i, j], num / den, atol=1e-7)

    def test_sigma_to_zero_recovers_hint(self):
        mask = np.ones((32, 32), dtype=bool)
        hints = [hint(5, 5, 1.0, -2.0), hint(25, 25, -3.0, 4.0)]
        out = densify_hints(hints, mask, sigma=0.5)
        assert np.allclose(out.data[5, 5], [1.0, -2.0], atol=1e-6)
        assert np.allclose(out.data[25, 25], [-3.0, 4.0], atol=1e-6)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        mask = np.ones((16, 16), dtype=bool)
        hints = [hint(rng.uniform(0, 15), rng.uniform(0, 15), *rng.normal(0, 1, 2)) for _ in range(6)]
        a = densify_hints(hints, mask, sigma=3.0)
        b = densify_hints(hints[::-1], mask, sigma=3.0)
        assert np.allclose(a.data, b.data, atol=1e-12)

    def test_no_hints(self):
        with pytest.raises(NoHints):
            densify_hints([], np.ones((4, 4), bool))

    def test_zero_outside_mask(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[2:5, 2:5] = True
        out = densify_hints([hint(3, 3, 1.0, 1.0)], mask, sigma=2.0)
        assert np.all(out.data[~mask] == 0)
        assert np.array_equal(out.valid_mask, mask)


class TestIntegrate:
    def test_zero_steps(self):
        f = const_field(8, 8, 1.0, -1.0)
        d = integrate_euler(f, 0)
        assert np.all(d.data == 0)
        assert d.valid_mask.all()

    def test_constant_field(self):
        f = const_field(16, 16, 1.0, 0.0)
        d = integrate_euler(f, 5)
        # away from the right border the displacement is exactly (5, 0)
        assert np.allclose(d.data[:, :10, 0], 5.0)
        assert np.allclose(d.data[:, :10, 1], 0.0)
        assert d.valid_mask[:, :10].all()
        # paths that left the raster are flagged
        assert not d.valid_mask[:, -3:].any()

    def test_rotation_oracle(self):
        h = w = 64
        omega = np.deg2rad(2.0)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        cx = cy = 31.5
        data = np.stack([-omega * (yy - cy), omega * (xx - cx)], axis=-1)
        f = MotionField(data=data, valid_mask=np.ones((h, w), bool))
        steps = 8
        d = integrate_euler(f, steps)
        # analytic rotation by steps*omega about the center
        r = np.hypot(xx - cx, yy - cy)
        ang = steps * omega
        ex = cx + np.cos(ang) * (xx - cx) - np.sin(ang) * (yy - cy)
        ey = cy + np.sin(ang) * (xx - cx) + np.cos(ang) * (yy - cy)
        inner = r < h / 4
        err = np.hypot(d.data[..., 0] + xx - ex, d.data[..., 1] + yy - ey)
        assert err[inner].max() < 0.5

    def test_step_composition(self):
        rng = np.random.default_rng(10)
        data = rng.normal(0, 0.8, size=(24, 24, 2))
        f = MotionField(data=data, valid_mask=np.ones((24, 24), bool))
        whole = integrate_euler(f, 7)
        ys, xs = np.mgrid[0:24, 0:24].astype(np.float64)
        x, y, _ = advance_positions(f, xs.copy(), ys.copy(), 3)
        x, y, _ = advance_positions(f, x, y, 4)
        assert np.array_equal(whole.data[..., 0], x - xs)
        assert np.array_equal(whole.data[..., 1], y - ys)


class TestInvert:
    def test_zero(self):
        f = const_field(8, 8, 0.0, 0.0)
        inv = invert_displacement(integrate_euler(f, 3))
        assert np.all(inv.data == 0)

    def test_translation(self):
        h = w = 24
        d = integrate_euler(const_field(h, w, 5.0, 0.0), 1)
        inv = invert_displacement(d)
        # overlap region received direct votes of exactly (-5, 0)
        assert np.allclose(inv.data[:, 6:, 0], -5.0)
        assert np.allclose(inv.data[:, 6:, 1], 0.0)

    def test_self_composition(self):
        rng = np.random.default_rng(11)
        h = w = 48
        # smooth field with magnitude <= 3 px
        base = rng.normal(0, 1, size=(6, 6, 2))
        data = np.stack(
            [np.kron(base[..., c], np.ones((8, 8))) for c in range(2)], axis=-1
        )
        data *= 3.0 / max(np.abs(data).max(), 1e-9)
        f = MotionField(data=data, valid_mask=np.ones((h, w), bool))
        d = integrate_euler(f, 1)
        inv = invert_displacement(d)
        # compose: follow D then D^-1, should return near the start
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        px = xs + d.data[..., 0]
        py = ys + d.data[..., 1]
        back = bilinear_sample(inv.data, px, py)
        err = np.hypot(px + back[..., 0] - xs, py + back[..., 1] - ys)
        valid = d.valid_mask
        assert err[valid].mean() <= 0.75

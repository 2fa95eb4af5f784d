import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stillflow import (
    BadMagic,
    DimensionMismatch,
    EmptySequence,
    MissingFile,
    NonPositiveDepth,
    average_flow_window,
    load_scene,
    read_flo,
    write_flo,
)
from stillflow.scene_io import MotionField, read_pfm, write_pfm

from conftest import write_scene


def field(arr):
    arr = np.asarray(arr, dtype=np.float32)
    return MotionField(data=arr, valid_mask=np.ones(arr.shape[:2], dtype=bool))


class TestLoadScene:
    def test_defaults_at_256(self, scene_dir):
        path = write_scene(scene_dir, h=256, w=256)
        bundle = load_scene(path)
        assert bundle.shape == (256, 256)
        # 90 degree vertical FOV: fy = H/2
        assert bundle.intrinsics.fy == 128.0
        assert bundle.intrinsics.fx == 128.0
        assert bundle.intrinsics.cx == 128.0 and bundle.intrinsics.cy == 128.0
        assert bundle.z_map.shape == (256, 256)
        assert np.all(bundle.z_map == 0.0)
        assert bundle.fluid_layer is None and bundle.background_layer is None

    def test_dimension_mismatch(self, scene_dir):
        path = write_scene(scene_dir, h=32, w=32, depth_shape=(16, 16))
        with pytest.raises(DimensionMismatch):
            load_scene(path)

    def test_nonpositive_depth(self, scene_dir):
        path = write_scene(scene_dir, depth_pixel_zero=True)
        with pytest.raises(NonPositiveDepth):
            load_scene(path)

    def test_missing_asset(self, scene_dir):
        path = write_scene(scene_dir)
        (scene_dir / "depth.pfm").unlink()
        with pytest.raises(MissingFile):
            load_scene(path)

    def test_hints_loaded(self, scene_dir):
        path = write_scene(scene_dir, hints=[(4, 5, 1.5, -0.5)])
        bundle = load_scene(path)
        assert len(bundle.hints) == 1
        assert bundle.hints[0].velocity == (1.5, -0.5)

    def test_directory_argument(self, scene_dir):
        write_scene(scene_dir)
        assert load_scene(scene_dir).shape == (32, 32)


class TestFlo:
    def test_round_trip_2x1(self, tmp_path):
        data = np.array([[[1.0, 0.0], [0.0, -2.5]]], dtype=np.float32)
        p = tmp_path / "f.flo"
        write_flo(field(data), p)
        back = read_flo(p)
        assert back.data.shape == (1, 2, 2)
        assert np.array_equal(back.data, data)

    def test_zero_field(self, tmp_path):
        p = tmp_path / "z.flo"
        write_flo(field(np.zeros((3, 3, 2))), p)
        back = read_flo(p)
        assert back.data.shape == (3, 3, 2)
        assert np.count_nonzero(back.data) == 0

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.flo"
        p.write_bytes(b"\x00\x00\x00\x00" + b"\x01\x00\x00\x00" * 2 + b"\x00" * 8)
        with pytest.raises(BadMagic):
            read_flo(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.flo"
        write_flo(field(np.ones((4, 4, 2))), p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(Exception) as ei:
            read_flo(p)
        assert "short" in str(ei.value)

    @settings(max_examples=25, deadline=None)
    @given(
        h=st.integers(1, 6),
        w=st.integers(1, 6),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_round_trip_random(self, h, w, seed):
        import tempfile
        from pathlib import Path

        rng = np.random.default_rng(seed)
        data = (rng.standard_normal((h, w, 2)) * 10).astype(np.float32)
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "r.flo"
            write_flo(field(data), p)
            assert np.array_equal(read_flo(p).data, data)


class TestAverageWindow:
    def test_constant_sequence(self):
        fields = [field(np.full((2, 2, 2), 3.5)) for _ in range(10)]
        out = average_flow_window(fields, window=4)
        for f in out:
            assert np.allclose(f.data, 3.5)

    def test_two_frame_mean(self):
        fields = [field([[[2.0, 0.0]]]), field([[[0.0, 0.0]]])]
        out = average_flow_window(fields, window=2)
        assert np.allclose(out[0].data, [[[1.0, 0.0]]])
        assert np.allclose(out[1].data, [[[1.0, 0.0]]])

    def test_window_one_identity(self):
        rng = np.random.default_rng(0)
        fields = [field(rng.standard_normal((3, 4, 2))) for _ in range(5)]
        out = average_flow_window(fields, window=1)
        for a, b in zip(fields, out):
            assert np.array_equal(a.data, b.data)

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(42)
        fields = [field(rng.standard_normal((4, 5, 2)).astype(np.float32)) for _ in range(60)]
        window = 30
        out = average_flow_window(fields, window=window)
        # oracle: literal sliding-window accumulation, frame by frame
        half = window // 2
        for i in range(60):
            lo = max(0, i - half)
            hi = min(60, i + half + 1)
            acc = np.zeros((4, 5, 2))
            for j in range(lo, hi):
                acc += fields[j].data.astype(np.float64)
            assert np.allclose(out[i].data, acc / (hi - lo), atol=1e-10)

    def test_empty_sequence(self):
        with pytest.raises(EmptySequence):
            average_flow_window([], window=3)


class TestPfm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.random((7, 5)).astype(np.float32) + 0.5
        p = tmp_path / "d.pfm"
        write_pfm(arr, p)
        assert np.array_equal(read_pfm(p), arr)

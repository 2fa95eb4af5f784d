import json

import numpy as np
import pytest

from stillflow.scene_io import write_pfm, write_image


def smooth_depth(h, w, base=2.0, amplitude=0.3, seed=0):
    """Low-frequency positive depth map for synthetic scenes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = base * np.ones((h, w))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        amp = rng.uniform(0.2, 1.0) * amplitude
        d += amp * np.sin(2 * np.pi * fx * xx / w + px) * np.sin(2 * np.pi * fy * yy / h + py)
    return d.astype(np.float32)


def write_scene(
    dirpath,
    h=32,
    w=32,
    depth=None,
    mask=None,
    hints=(),
    image=None,
    depth_pixel_zero=False,
    depth_shape=None,
    extra=None,
):
    """Materialize a synthetic scene directory and return its manifest path."""
    dirpath.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    if image is None:
        image = rng.random((h, w, 3)).astype(np.float32)
    write_image(image, dirpath / "image.png")

    if depth is None:
        depth = np.full(depth_shape or (h, w), 2.0, dtype=np.float32)
    if depth_pixel_zero:
        depth = depth.copy()
        depth[h // 2, w // 2] = 0.0
    write_pfm(depth, dirpath / "depth.pfm")

    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    write_image(mask.astype(np.float32), dirpath / "mask.png")

    manifest = {
        "image": "image.png",
        "depth": "depth.pfm",
        "fluid_mask": "mask.png",
        "hints": [{"u": u, "v": v, "vx": vx, "vy": vy} for (u, v, vx, vy) in hints],
    }
    if extra:
        manifest.update(extra)
    path = dirpath / "scene.json"
    path.write_text(json.dumps(manifest))
    return path


@pytest.fixture
def scene_dir(tmp_path):
    return tmp_path / "scene"


# ---------------------------------------------------------------------------
# Synthetic simulation scenes: a fluid channel with solid banks, open at the
# left/right image borders, under three depth profiles.
# ---------------------------------------------------------------------------

def channel_scene(kind="flat", h=24, w=40, speed=1.2, bank=4):
    """Returns (depth, mask, intrinsics, motion) for a bank-bounded channel
    flowing in +u; `kind` in {flat, slanted, valley}."""
    from stillflow.scene_io import CameraIntrinsics, MotionField

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "flat":
        depth = np.full((h, w), 2.0)
    elif kind == "slanted":
        depth = 2.0 + 1.2 * yy / h
    elif kind == "valley":
        t = (yy / (h - 1) - 0.5)
        depth = 2.0 + 1.5 * t * t
    else:
        raise ValueError(kind)
    mask = np.zeros((h, w), dtype=bool)
    mask[bank:-bank, :] = True
    K = CameraIntrinsics(fx=h / 2.0, fy=h / 2.0, cx=w / 2.0, cy=h / 2.0)
    data = np.zeros((h, w, 2))
    data[..., 0] = speed
    motion = MotionField(data=data, valid_mask=mask.copy())
    return depth.astype(np.float32), mask, K, motion


def random_small_mesh(seed, max_side=5):
    """Small random mesh (<= 50 vertices) with a random fluid mask that
    keeps at least one fluid face; used for solver oracle tests."""
    from stillflow.mesh import build_mesh
    from stillflow.scene_io import CameraIntrinsics

    rng = np.random.default_rng(seed)
    h = int(rng.integers(3, max_side + 1))
    w = int(rng.integers(3, min(max_side, 50 // h) + 1))
    depth = smooth_depth(h, w, base=2.0, amplitude=0.3, seed=seed)
    K = CameraIntrinsics(fx=h, fy=h, cx=w / 2.0, cy=h / 2.0)
    while True:
        mask = rng.random((h, w)) > rng.uniform(0.0, 0.4)
        try:
            return build_mesh(depth, mask, K, stride=1)
        except Exception:
            continue

"""Dense motion from sparse hints, and time integration of motion fields.

The densifier is a Gaussian-weighted average of the labelled velocities:
each fluid pixel gets sum_k V_k exp(-d_k^2/sigma^2) / sum_k exp(-d_k^2/sigma^2)
with d_k the Euclidean pixel distance to hint k.  Weights are normalized
with the max-exponent trick so a lone far-away hint still yields its exact
velocity instead of 0/0.

Euler integration advances each pixel's position through the (static) field
one frame at a time; positions that leave the raster clamp to the border and
mark the path invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoHints
from .scene_io import MotionField, SparseHint


def default_sigma(height: int, width: int) -> float:
    # bandwidth proportional to image size
    return 0.1 * max(height, width)


def densify_hints(hints, fluid_mask: np.ndarray, sigma: float | None = None) -> MotionField:
    """Spread sparse velocity hints over the fluid region."""
    hints = list(hints)
    if not hints:
        raise NoHints("at least one motion hint is required")
    fluid_mask = np.asarray(fluid_mask, dtype=bool)
    h, w = fluid_mask.shape
    if sigma is None:
        sigma = default_sigma(h, w)
    if sigma <= 0:
        raise ValueError("sigma must be positive")

    ys, xs = np.nonzero(fluid_mask)
    pu = np.array([hint.u for hint in hints])
    pv = np.array([hint.v for hint in hints])
    vel = np.array([[hint.vx, hint.vy] for hint in hints])

    d2 = (xs[:, None] - pu[None, :]) ** 2 + (ys[:, None] - pv[None, :]) ** 2
    expo = -d2 / (sigma * sigma)
    expo -= expo.max(axis=1, keepdims=True)
    wgt = np.exp(expo)
    out = (wgt @ vel) / wgt.sum(axis=1, keepdims=True)

    data = np.zeros((h, w, 2))
    data[ys, xs] = out
    return MotionField(data=data, valid_mask=fluid_mask.copy())


@dataclass
class DisplacementMap:
    """Per-pixel displacement D with target position = (x, y) + D(x, y)."""

    data: np.ndarray        # (H, W, 2)
    valid_mask: np.ndarray  # (H, W) bool, false where the path left the raster

    @property
    def shape(self):
        return self.data.shape[:2]


def bilinear_sample(field: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample (H, W, C) data at float coordinates, clamping to the border."""
    h, w = field.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    v00 = field[y0, x0]
    v01 = field[y0, x1]
    v10 = field[y1, x0]
    v11 = field[y1, x1]
    return (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )


def advance_positions(field: MotionField, x, y, steps: int):
    """Step positions through the field; returns (x, y, stayed_inside)."""
    h, w = field.shape
    data = field.data.astype(np.float64)
    inside = np.ones(x.shape, dtype=bool)
    for _ in range(steps):
        step = bilinear_sample(data, x, y)
        x = x + step[..., 0]
        y = y + step[..., 1]
        out = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
        inside &= ~out
        x = np.clip(x, 0.0, w - 1.0)
        y = np.clip(y, 0.0, h - 1.0)
    return x, y, inside


def integrate_euler(field: MotionField, steps: int) -> DisplacementMap:
    """Displacement after `steps` Euler steps through the motion field."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    h, w = field.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    x, y, inside = advance_positions(field, xs.copy(), ys.copy(), steps)
    data = np.stack([x - xs, y - ys], axis=-1)
    return DisplacementMap(data=data, valid_mask=inside)


def integrate_euler_sequence(field: MotionField, n: int):
    """All displacement maps D_0 .. D_n in one sweep (shared positions)."""
    h, w = field.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    x, y = xs.copy(), ys.copy()
    inside = np.ones((h, w), dtype=bool)
    out = [DisplacementMap(data=np.zeros((h, w, 2)), valid_mask=inside.copy())]
    for _ in range(n):
        x, y, still = advance_positions(field, x, y, 1)
        inside &= still
        out.append(DisplacementMap(data=np.stack([x - xs, y - ys], axis=-1), valid_mask=inside.copy()))
    return out


def invert_displacement(disp: DisplacementMap) -> DisplacementMap:
    """Approximate inverse by scattering negated displacements forward.

    Each source pixel votes -D at its rounded target; collisions average.
    Holes are closed by repeated 3x3 neighbor-mean dilation, so the result
    is total but only approximate where the forward map folds.
    """
    h, w = disp.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = np.rint(xs + disp.data[..., 0]).astype(np.int64)
    ty = np.rint(ys + disp.data[..., 1]).astype(np.int64)
    ok = disp.valid_mask & (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)

    acc = np.zeros((h, w, 2))
    cnt = np.zeros((h, w))
    flat = ty[ok] * w + tx[ok]
    np.add.at(acc.reshape(-1, 2), flat, -disp.data[ok])
    np.add.at(cnt.reshape(-1), flat, 1.0)
    covered = cnt > 0
    data = np.zeros((h, w, 2))
    data[covered] = acc[covered] / cnt[covered, None]

    # dilate into holes until full (or nothing left to grow into)
    known = covered.copy()
    while not known.all():
        ksum = _box3(data * known[..., None])
        kcnt = _box3(known.astype(np.float64))
        grow = ~known & (kcnt > 0)
        if not grow.any():
            break
        data[grow] = ksum[grow] / kcnt[grow, None]
        known |= grow
    return DisplacementMap(data=data, valid_mask=known)


def _box3(arr: np.ndarray) -> np.ndarray:
    """Sum over the 3x3 neighborhood (zero padding)."""
    pad = np.pad(arr, [(1, 1), (1, 1)] + [(0, 0)] * (arr.ndim - 2))
    out = np.zeros_like(arr, dtype=np.float64)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += pad[dy : dy + arr.shape[0], dx : dx + arr.shape[1]]
    return out

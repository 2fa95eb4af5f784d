"""Frame synthesis by layered forward warping.

Each output frame i warps the first-frame fluid layer forward by i Euler
steps and the last-frame fluid layer backward by n-i steps (via the inverted
displacement), blends the two partial rasters with exponential confidence
weights ramped linearly in time,

    out = (fwd e^{z0} (n-i) + bwd e^{zn} i) / (e^{z0} (n-i) + e^{zn} i),

fills any pixels neither warp reached by masked 3x3 mean diffusion, and
composites the fluid layer over the static background with the two-alpha
rule out = (a_f I_f + a_b I_b) / (a_f + a_b).  In cyclic mode the last-frame
layer is replaced by the first-frame layer so frame n reproduces frame 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllHoles
from .motion import (
    DisplacementMap,
    integrate_euler_sequence,
    invert_displacement,
)
from .scene_io import MotionField, SceneBundle

COVERAGE_EPS = 1e-6
ALPHA_EPS = 1e-8
DEFAULT_FRAMES = 60
# label prior for the fraction of background showing through fluid pixels
BACKGROUND_ALPHA_UNDER_FLUID = 0.25


@dataclass
class LayerStack:
    fluid0: np.ndarray       # (H, W, 4) straight RGBA at the first frame
    fluidn: np.ndarray       # (H, W, 4) RGBA at the last frame
    background: np.ndarray   # (H, W, 4), alpha channel is a_b
    z0: np.ndarray           # (H, W) splat logits for the first frame
    zn: np.ndarray           # (H, W) splat logits for the last frame

    def __post_init__(self):
        shapes = {a.shape[:2] for a in (self.fluid0, self.fluidn, self.background, self.z0, self.zn)}
        if len(shapes) != 1:
            raise ValueError("layer stack rasters disagree in shape")

    @property
    def shape(self):
        return self.z0.shape

    @staticmethod
    def from_scene(scene: SceneBundle) -> "LayerStack":
        """Build layers from a bare scene when no decomposition is supplied:
        fluid = image masked to the fluid region, background = image with
        reduced alpha under fluid (the 0.25 show-through prior)."""
        h, w = scene.shape
        mask = scene.fluid_mask.astype(np.float32)
        if scene.fluid_layer is not None:
            fluid = scene.fluid_layer.astype(np.float32)
        else:
            fluid = np.concatenate([scene.image * mask[..., None], mask[..., None]], axis=2)
        if scene.background_layer is not None:
            background = scene.background_layer.astype(np.float32)
        else:
            alpha_b = 1.0 - (1.0 - BACKGROUND_ALPHA_UNDER_FLUID) * mask
            background = np.concatenate([scene.image, alpha_b[..., None]], axis=2)
        z = scene.z_map if scene.z_map is not None else np.zeros((h, w), dtype=np.float32)
        return LayerStack(
            fluid0=fluid,
            fluidn=fluid.copy(),
            background=background,
            z0=np.asarray(z, dtype=np.float64),
            zn=np.asarray(z, dtype=np.float64),
        )


@dataclass
class FrameDiagnostics:
    index: int
    hole_fraction: float
    forward_weight_mean: float


@dataclass
class FrameSequence:
    frames: list            # (H, W, 3) float arrays
    diagnostics: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# Splatting / blending / compositing
# ---------------------------------------------------------------------------

def splat_forward(payload: np.ndarray, displacement: DisplacementMap, z: np.ndarray):
    """Scatter each source pixel to its 4 bilinear targets with weight
    bilinear * exp(z); returns (normalized raster, coverage mask).

    exp runs on z shifted by its max: the weight ratios (all that matter
    after normalization) are unchanged and nothing overflows.
    """
    h, w = displacement.shape
    payload = np.asarray(payload, dtype=np.float64)
    c = payload.shape[2]
    ys, xs = np.nonzero(displacement.valid_mask)
    tx = xs + displacement.data[ys, xs, 0]
    ty = ys + displacement.data[ys, xs, 1]
    conf = np.exp(z[ys, xs] - (z[ys, xs].max() if len(ys) else 0.0))
    vals = payload[ys, xs]

    x0 = np.floor(tx).astype(np.int64)
    y0 = np.floor(ty).astype(np.int64)
    fx = tx - x0
    fy = ty - y0
    acc = np.zeros((h * w, c))
    wsum = np.zeros(h * w)
    for yy, xx, bw in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x0 + 1, fx * (1 - fy)),
        (y0 + 1, x0, (1 - fx) * fy),
        (y0 + 1, x0 + 1, fx * fy),
    ):
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        wgt = bw[ok] * conf[ok]
        flat = yy[ok] * w + xx[ok]
        np.add.at(acc, flat, wgt[:, None] * vals[ok])
        np.add.at(wsum, flat, wgt)
    coverage = wsum > COVERAGE_EPS
    out = np.zeros((h * w, c))
    out[coverage] = acc[coverage] / wsum[coverage, None]
    return out.reshape(h, w, c), coverage.reshape(h, w)


def blend_symmetric(
    fwd: np.ndarray,
    fwd_coverage: np.ndarray,
    bwd: np.ndarray,
    bwd_coverage: np.ndarray,
    z_fwd: np.ndarray,
    z_bwd: np.ndarray,
    i: int,
    n: int,
):
    """Time-ramped softmax blend of the two partial warps.

    Reduces to the forward raster exactly at i=0 and the backward one at
    i=n; pixels covered by a single side take that side, pixels covered by
    neither stay holes.  Returns (raster, coverage, mean forward weight).
    """
    if n > 0 and i == 0:
        return fwd.copy(), fwd_coverage.copy(), 1.0
    if n > 0 and i == n:
        return bwd.copy(), bwd_coverage.copy(), 0.0
    if n == 0:
        return fwd.copy(), fwd_coverage.copy(), 1.0
    m = np.maximum(z_fwd, z_bwd)
    wf = np.where(fwd_coverage, np.exp(z_fwd - m) * (n - i), 0.0)
    wb = np.where(bwd_coverage, np.exp(z_bwd - m) * i, 0.0)
    total = wf + wb
    covered = total > 0
    out = np.zeros_like(fwd)
    out[covered] = (
        wf[covered, None] * fwd[covered] + wb[covered, None] * bwd[covered]
    ) / total[covered, None]
    frac = float(np.mean(wf[covered] / total[covered])) if covered.any() else 0.0
    return out, covered, frac


def composite(fluid_rgb, alpha_f, background_rgb, alpha_b):
    """Two-alpha composite; where both alphas vanish the background shows.

    Returns (rgb, degenerate_mask).
    """
    alpha_f = np.asarray(alpha_f, dtype=np.float64)
    alpha_b = np.asarray(alpha_b, dtype=np.float64)
    total = alpha_f + alpha_b
    degenerate = total <= ALPHA_EPS
    safe = np.where(degenerate, 1.0, total)
    out = (alpha_f[..., None] * fluid_rgb + alpha_b[..., None] * background_rgb) / safe[..., None]
    out[degenerate] = background_rgb[degenerate]
    return out, degenerate


def hole_fill(raster: np.ndarray, coverage: np.ndarray):
    """Fill holes by repeated masked 3x3 mean diffusion until total."""
    coverage = np.asarray(coverage, dtype=bool)
    if not coverage.any():
        raise AllHoles("raster has no covered pixel to diffuse from")
    data = np.asarray(raster, dtype=np.float64).copy()
    data[~coverage] = 0.0
    known = coverage.copy()
    while not known.all():
        ksum = _box3(data * known[..., None] if data.ndim == 3 else data * known)
        kcnt = _box3(known.astype(np.float64))
        grow = ~known & (kcnt > 0)
        if not grow.any():
            break
        if data.ndim == 3:
            data[grow] = ksum[grow] / kcnt[grow, None]
        else:
            data[grow] = ksum[grow] / kcnt[grow]
        known |= grow
    return data


def _box3(arr):
    pad = np.pad(arr, [(1, 1), (1, 1)] + [(0, 0)] * (arr.ndim - 2))
    out = np.zeros(arr.shape, dtype=np.float64)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += pad[dy : dy + arr.shape[0], dx : dx + arr.shape[1]]
    return out


# ---------------------------------------------------------------------------
# Sequence rendering
# ---------------------------------------------------------------------------

def render_sequence(
    layers: LayerStack,
    motion: MotionField,
    n: int = DEFAULT_FRAMES,
    cyclic: bool = True,
) -> FrameSequence:
    if layers.shape != motion.shape:
        raise ValueError("layers and motion field disagree in shape")
    if n == 0:
        rgb, _ = composite(
            layers.fluid0[..., :3], layers.fluid0[..., 3],
            layers.background[..., :3], layers.background[..., 3],
        )
        return FrameSequence(frames=[rgb], diagnostics=[FrameDiagnostics(0, 0.0, 1.0)])

    end_layer = layers.fluid0 if cyclic else layers.fluidn
    end_z = layers.z0 if cyclic else layers.zn
    disp = integrate_euler_sequence(motion, n)

    payload0 = np.concatenate([layers.fluid0, layers.z0[..., None]], axis=2)
    payloadn = np.concatenate([end_layer, end_z[..., None]], axis=2)

    frames = []
    diags = []
    for i in range(n + 1):
        fwd, fcov = splat_forward(payload0, disp[i], layers.z0)
        bwd, bcov = splat_forward(payloadn, invert_displacement(disp[n - i]), end_z)
        blended, cov, fw_mean = blend_symmetric(
            fwd[..., :4], fcov, bwd[..., :4], bcov, fwd[..., 4], bwd[..., 4], i, n
        )
        hole_fraction = float(1.0 - cov.mean())
        filled = hole_fill(blended, cov)
        rgb, _ = composite(
            filled[..., :3], np.clip(filled[..., 3], 0.0, 1.0),
            layers.background[..., :3], layers.background[..., 3],
        )
        frames.append(rgb)
        diags.append(FrameDiagnostics(index=i, hole_fraction=hole_fraction, forward_weight_mean=fw_mean))
    return FrameSequence(frames=frames, diagnostics=diags)

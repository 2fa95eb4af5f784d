"""Pixel-aligned 2D ablation solver: PIC on a staggered MAC grid.

Cells are pixels; FLUID comes from the fluid mask, everything else in frame
is SOLID, and the world outside the image border counts as AIR (pressure 0),
mirroring the surface solver's open image-border boundaries.  u lives on
vertical faces (H, W+1), v on horizontal faces (H+1, W), both in pixels per
frame with v positive downward like raster y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .sim import SimConfig, jacobi_cg
from .errors import SingularSystem
from .scene_io import MotionField

FLUID = 1
SOLID = 0


@dataclass
class Grid2DState:
    labels: np.ndarray      # (H, W) FLUID/SOLID
    u: np.ndarray           # (H, W+1)
    v: np.ndarray           # (H+1, W)
    px: np.ndarray = field(default=None)   # particle positions (cell units)
    py: np.ndarray = field(default=None)
    pvx: np.ndarray = field(default=None)
    pvy: np.ndarray = field(default=None)
    rng: np.random.Generator = None
    diagnostics: list = field(default_factory=list)

    @property
    def shape(self):
        return self.labels.shape


def state_from_motion(field: MotionField, fluid_mask: np.ndarray, config: SimConfig,
                      particles: bool = True) -> Grid2DState:
    """Initialize grid (and optionally 4 particles per fluid cell) from a
    per-pixel motion field."""
    labels = np.where(np.asarray(fluid_mask, dtype=bool), FLUID, SOLID).astype(np.uint8)
    u, v = _faces_from_centers(field.data[..., 0], field.data[..., 1])
    state = Grid2DState(labels=labels, u=u, v=v, rng=np.random.default_rng(config.seed))
    if particles:
        ys, xs = np.nonzero(labels == FLUID)
        offs = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
        px = (xs[:, None] + offs[None, :, 0] - 0.5).ravel()
        py = (ys[:, None] + offs[None, :, 1] - 0.5).ravel()
        jitter = state.rng.uniform(-0.1, 0.1, size=(2, px.size))
        state.px = px + jitter[0]
        state.py = py + jitter[1]
        state.pvx = _sample_u(u, state.px, state.py)
        state.pvy = _sample_v(v, state.px, state.py)
    return state


def _faces_from_centers(cx: np.ndarray, cy: np.ndarray):
    h, w = cx.shape
    u = np.zeros((h, w + 1))
    u[:, 1:-1] = 0.5 * (cx[:, :-1] + cx[:, 1:])
    u[:, 0] = cx[:, 0]
    u[:, -1] = cx[:, -1]
    v = np.zeros((h + 1, w))
    v[1:-1, :] = 0.5 * (cy[:-1, :] + cy[1:, :])
    v[0, :] = cy[0, :]
    v[-1, :] = cy[-1, :]
    return u, v


def centers_from_faces(u: np.ndarray, v: np.ndarray):
    cx = 0.5 * (u[:, :-1] + u[:, 1:])
    cy = 0.5 * (v[:-1, :] + v[1:, :])
    return cx, cy


def _bilinear(grid, x, y):
    h, w = grid.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    return (
        grid[y0, x0] * (1 - fx) * (1 - fy)
        + grid[y0, x1] * fx * (1 - fy)
        + grid[y1, x0] * (1 - fx) * fy
        + grid[y1, x1] * fx * fy
    )


# cell center (i, j) sits at (x, y) = (j, i); u face (i, j) at (j - 0.5, i);
# v face (i, j) at (j, i - 0.5)
def _sample_u(u, x, y):
    return _bilinear(u, x + 0.5, y)


def _sample_v(v, x, y):
    return _bilinear(v, x, y + 0.5)


def _scatter(grid_shape, x, y, val):
    """Bilinear scatter (sum and weight) onto a grid; returns normalized grid."""
    h, w = grid_shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    acc = np.zeros(h * w)
    wgt = np.zeros(h * w)
    for yy, xx, ww in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x1, fx * (1 - fy)),
        (y1, x0, (1 - fx) * fy),
        (y1, x1, fx * fy),
    ):
        np.add.at(acc, yy * w + xx, ww * val)
        np.add.at(wgt, yy * w + xx, ww)
    out = np.zeros(h * w)
    nz = wgt > 1e-12
    out[nz] = acc[nz] / wgt[nz]
    return out.reshape(h, w), wgt.reshape(h, w)


def _solid_u_faces(labels):
    h, w = labels.shape
    solid = labels == SOLID
    mask = np.zeros((h, w + 1), dtype=bool)
    mask[:, :-1] |= solid
    mask[:, 1:] |= solid
    return mask


def _solid_v_faces(labels):
    h, w = labels.shape
    solid = labels == SOLID
    mask = np.zeros((h + 1, w), dtype=bool)
    mask[:-1, :] |= solid
    mask[1:, :] |= solid
    return mask


def divergence(state: Grid2DState) -> np.ndarray:
    d = (state.u[:, 1:] - state.u[:, :-1]) + (state.v[1:, :] - state.v[:-1, :])
    d[state.labels != FLUID] = 0.0
    return d


def assemble_grid_system(labels: np.ndarray):
    """Standard 5-point Poisson matrix over fluid cells: solid neighbors drop
    the link (Neumann), out-of-frame neighbors keep the diagonal (air, p=0)."""
    h, w = labels.shape
    fluid = labels == FLUID
    index = -np.ones(h * w, dtype=np.int64)
    ids = np.nonzero(fluid.ravel())[0]
    index[ids] = np.arange(len(ids))
    rows, cols, vals = [], [], []
    diag = np.zeros(len(ids))
    has_dirichlet = False
    ys, xs = np.nonzero(fluid)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        ny, nx = ys + dy, xs + dx
        in_frame = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        # out of frame = air: Dirichlet contribution, keep diagonal
        diag[~in_frame] += 1.0
        if np.any(~in_frame):
            has_dirichlet = True
        nb_fluid = np.zeros(len(ys), dtype=bool)
        nb_fluid[in_frame] = fluid[ny[in_frame], nx[in_frame]]
        diag[nb_fluid] += 1.0
        r = index[ys[nb_fluid] * w + xs[nb_fluid]]
        c = index[ny[nb_fluid] * w + nx[nb_fluid]]
        rows.append(r)
        cols.append(c)
        vals.append(-np.ones(len(r)))
        # solid neighbor: no flux, no diagonal term
    n = len(ids)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return A, index, has_dirichlet


def project(state: Grid2DState, config: SimConfig):
    """Pressure projection on the MAC grid; returns CG iteration count."""
    labels = state.labels
    h, w = labels.shape
    su = _solid_u_faces(labels)
    sv = _solid_v_faces(labels)
    state.u[su] = 0.0
    state.v[sv] = 0.0

    div = divergence(state)
    A, index, has_dirichlet = assemble_grid_system(labels)
    fluid = labels == FLUID
    b = -(config.rho / config.dt) * div[fluid]
    if not has_dirichlet and len(b):
        if np.abs(b).max() > 0 and abs(b.sum()) > 1e-8 * np.abs(b).sum():
            raise SingularSystem("closed 2D domain with incompatible RHS")
        b = b - b.mean()

    x, iters, _ = jacobi_cg(A, b, config.solver_tol, config.solver_max_iter)
    p = np.zeros(h * w)
    p[index >= 0] = x
    p = p.reshape(h, w)

    scale = config.beta * config.dt / config.rho
    pe = np.pad(p, 1)  # air ghost cells carry p = 0
    fl = np.pad(fluid, 1)
    gu = pe[1:-1, 1:] - pe[1:-1, :-1]          # (H, W+1)
    touch_u = fl[1:-1, 1:] | fl[1:-1, :-1]
    gv = pe[1:, 1:-1] - pe[:-1, 1:-1]          # (H+1, W)
    touch_v = fl[1:, 1:-1] | fl[:-1, 1:-1]
    state.u -= scale * gu * touch_u
    state.v -= scale * gv * touch_v
    state.u[su] = 0.0
    state.v[sv] = 0.0
    return iters


def grid2d_step(state: Grid2DState, config: SimConfig):
    """advect -> body force -> transfer -> project -> PIC, one frame."""
    h, w = state.shape
    if state.px is not None and len(state.px):
        state.px = np.clip(state.px + state.pvx * config.dt, 0.0, w - 1.0)
        state.py = np.clip(state.py + state.pvy * config.dt, 0.0, h - 1.0)
        ug, wu = _scatter((h, w + 1), state.px + 0.5, state.py, state.pvx)
        vg, wv = _scatter((h + 1, w), state.px, state.py + 0.5, state.pvy)
        state.u = np.where(wu > 1e-12, ug, state.u)
        state.v = np.where(wv > 1e-12, vg, state.v)
    g = config.gravity_vector()
    if g[1] != 0.0:
        # 3D y-up gravity maps to +v (raster y grows downward)
        state.v += -g[1] * config.dt
    iters = project(state, config)
    if state.px is not None and len(state.px):
        state.pvx = _sample_u(state.u, state.px, state.py)
        state.pvy = _sample_v(state.v, state.px, state.py)
    post = float(np.abs(divergence(state)).max())
    state.diagnostics.append({"cg_iterations": iters, "max_divergence_post": post})
    return state


def motion_from_state(state: Grid2DState) -> MotionField:
    cx, cy = centers_from_faces(state.u, state.v)
    fluid = state.labels == FLUID
    data = np.stack([cx, cy], axis=-1)
    data[~fluid] = 0.0
    return MotionField(data=data, valid_mask=fluid)


def project_motion_grid2d(field: MotionField, fluid_mask: np.ndarray, config: SimConfig) -> MotionField:
    """One pressure projection of a per-pixel field (no advection), the 2D
    half of the flat-scene mesh/grid comparison."""
    state = state_from_motion(field, fluid_mask, config, particles=False)
    project(state, config)
    return motion_from_state(state)

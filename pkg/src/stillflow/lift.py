"""Lift 2D image motion onto mesh faces and project 3D motion back.

Differentiating the pinhole projection (with this package's y-up unprojection)
gives the 2x3 Jacobian

    J(x, y, z) = [[ fx/z, 0,     -fx*x/z^2 ],
                  [ 0,    -fy/z,  fy*y/z^2 ]]

so pixel velocity = J * world velocity.  A face velocity is constrained to the
face plane, w = E @ (mu, lam), which turns the lift into a per-face 2x2 solve
(J E) (mu, lam) = (du, dv) sampled at the projected centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import SurfaceMesh, project, vectors_from_coefficients
from .motion import bilinear_sample
from .scene_io import CameraIntrinsics, MotionField

LIFT_COND_LIMIT = 1e10


@dataclass
class FaceVelocityField:
    """One 3D velocity per face, in the face plane, plus its edge coefficients."""

    w: np.ndarray             # (F, 3) m/frame
    coeffs: np.ndarray        # (F, 2) (mu, lam) with w = E @ coeffs
    degenerate: np.ndarray = field(default=None)  # (F,) faces zeroed by the lift

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.w), dtype=bool)

    def copy(self):
        return FaceVelocityField(self.w.copy(), self.coeffs.copy(), self.degenerate.copy())


def projection_jacobian(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """(..., 2, 3) pixel-velocity Jacobian at 3D points (y-sign per raster)."""
    pts = np.asarray(points, dtype=np.float64)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    J = np.zeros(pts.shape[:-1] + (2, 3))
    J[..., 0, 0] = intrinsics.fx / z
    J[..., 0, 2] = -intrinsics.fx * x / z**2
    J[..., 1, 1] = -intrinsics.fy / z
    J[..., 1, 2] = intrinsics.fy * y / z**2
    return J


def project_velocity(velocity, position, intrinsics: CameraIntrinsics):
    """Image-space velocity (du/dt, dv/dt) of a 3D point moving at `velocity`."""
    J = projection_jacobian(position, intrinsics)
    return np.einsum("...ij,...j->...i", J, np.asarray(velocity, dtype=np.float64))


def lift_flow(field: MotionField, mesh: SurfaceMesh, intrinsics: CameraIntrinsics) -> FaceVelocityField:
    """Per-face 3D velocity whose projection matches the sampled image flow.

    Faces whose composed 2x2 system is ill-conditioned (nearly edge-on) are
    zeroed and flagged rather than aborting the run.
    """
    uv = project(mesh.centroids, intrinsics)
    duv = bilinear_sample(field.data.astype(np.float64), uv[:, 0], uv[:, 1])
    J = projection_jacobian(mesh.centroids, intrinsics)
    JE = np.einsum("fij,fjk->fik", J, mesh.edge_mats)  # (F, 2, 2)

    det = JE[:, 0, 0] * JE[:, 1, 1] - JE[:, 0, 1] * JE[:, 1, 0]
    # condition estimate via Frobenius norms of JE and its inverse
    fro2 = np.einsum("fij,fij->f", JE, JE)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = fro2 / np.abs(det)
    bad = ~np.isfinite(cond) | (cond > LIFT_COND_LIMIT)

    inv = np.empty_like(JE)
    safe_det = np.where(bad, 1.0, det)
    inv[:, 0, 0] = JE[:, 1, 1]
    inv[:, 1, 1] = JE[:, 0, 0]
    inv[:, 0, 1] = -JE[:, 0, 1]
    inv[:, 1, 0] = -JE[:, 1, 0]
    inv /= safe_det[:, None, None]
    coeffs = np.einsum("fij,fj->fi", inv, duv)
    coeffs[bad] = 0.0
    w = vectors_from_coefficients(mesh, coeffs)
    return FaceVelocityField(w=w, coeffs=coeffs, degenerate=bad)


# ---------------------------------------------------------------------------
# Rasterization back to the image plane
# ---------------------------------------------------------------------------

def rasterize_triangles(vertices, triangles, intrinsics: CameraIntrinsics, shape,
                        face_subset=None):
    """Z-buffered triangle-id and barycentric rasterization at pixel centers.

    Returns (face_id (H, W) with -1 for no coverage, bary (H, W, 3),
    depth (H, W) with +inf for no coverage).
    """
    h, w = shape
    face_id = -np.ones((h, w), dtype=np.int64)
    bary_map = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    faces = np.arange(len(triangles)) if face_subset is None else np.asarray(face_subset)

    uv = project(vertices, intrinsics)
    zs = np.asarray(vertices)[:, 2]
    for f in faces:
        tri = triangles[f]
        p = uv[tri]
        x0, y0 = np.floor(p.min(axis=0)).astype(int)
        x1, y1 = np.ceil(p.max(axis=0)).astype(int)
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, w - 1), min(y1, h - 1)
        if x1 < x0 or y1 < y0:
            continue
        gy, gx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        det = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if abs(det) < 1e-12:
            continue
        l1 = ((gx - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (gy - p[0, 1])) / det
        l2 = ((p[1, 0] - p[0, 0]) * (gy - p[0, 1]) - (gx - p[0, 0]) * (p[1, 1] - p[0, 1])) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        # perspective-correct interpolation of depth via 1/z
        invz = l0 / zs[tri[0]] + l1 / zs[tri[1]] + l2 / zs[tri[2]]
        z = 1.0 / invz
        win = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        closer = inside & (z < depth[win])
        depth[win][closer] = z[closer]
        face_id[win][closer] = f
        sub = np.stack([l0, l1, l2], axis=-1)
        bary_map[win][closer] = sub[closer]
    return face_id, bary_map, depth


def rasterize_faces(mesh: SurfaceMesh, intrinsics: CameraIntrinsics, shape,
                    face_subset=None):
    return rasterize_triangles(mesh.vertices, mesh.triangles, intrinsics, shape,
                               face_subset=face_subset)


def rasterize_surface_motion(
    faces: FaceVelocityField,
    mesh: SurfaceMesh,
    intrinsics: CameraIntrinsics,
    shape,
    fluid_only: bool = True,
) -> MotionField:
    """Project per-face velocities to a dense 2D motion field.

    Each covered pixel takes project_velocity of the barycentrically
    interpolated surface point moving at its face's velocity; nearest-depth
    wins on overlap; uncovered pixels are invalid (zero motion).
    """
    subset = mesh.fluid_faces if fluid_only else None
    face_id, bary, _ = rasterize_faces(mesh, intrinsics, shape, face_subset=subset)
    covered = face_id >= 0
    data = np.zeros(shape + (2,))
    if covered.any():
        f = face_id[covered]
        pts = np.einsum("nk,nkj->nj", bary[covered], mesh.vertices[mesh.triangles[f]])
        data[covered] = project_velocity(faces.w[f], pts, intrinsics)
    return MotionField(data=data, valid_mask=covered)

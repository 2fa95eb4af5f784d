"""Surface-bound PIC fluid stepping with mesh pressure projection.

One frame applies the classic splitting: advect particles along the surface,
replenish from inflow boundaries, add body forces, average particle
velocities onto faces, then solve a Poisson system for pressure and subtract
its gradient so the face field is (weakly) divergence-free.

The discrete operators live in the per-face edge basis w = E @ (mu, lam):

  divergence at a vertex: sum over incident fluid faces of the rebased
  (mu + lam) / S term, which telescopes to zero over closed fans and matches
  the edge-flux form v . (n x opposite_edge) / (2 S^2);

  gradient per face: solve (E^T E)(mu_p, lam_p) = (p_b - p_a, p_c - p_a).

The pressure Laplacian is assembled as exactly divergence(gradient(.)) --
with wall-normal flux components zeroed on faces that border solid geometry
-- so the solved pressure cancels the same divergence the solver measures,
and the correction never pushes velocity through a wall.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import EmptyFluidRegion, SingularSystem, SolverDiverged
from .lift import FaceVelocityField
from .mesh import (
    INWARD,
    OPEN,
    OUTWARD,
    WALL,
    SurfaceMesh,
    closest_point_batch,
    face_coefficients,
    vectors_from_coefficients,
)

# difference matrix: (p_b - p_a, p_c - p_a) = B^T p, and the rebased
# divergence weights are exactly -B
_B = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


@dataclass
class SimConfig:
    dt: float = 1.0
    rho: float = 1.0
    gravity_scale: float = 0.0
    gravity: tuple | None = None          # overrides (0, -9.8*scale, 0)
    beta: float = 1.0                     # 1 = fully incompressible
    solver_tol: float = 1e-6
    solver_max_iter: int = 2000
    particles_per_face: int = 4
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must lie in [0, 1]")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def gravity_vector(self):
        if self.gravity is not None:
            return np.asarray(self.gravity, dtype=np.float64)
        return np.array([0.0, -9.8 * self.gravity_scale, 0.0])


@dataclass
class ParticleSet:
    positions: np.ndarray   # (N, 3)
    velocities: np.ndarray  # (N, 3)
    host: np.ndarray        # (N,) face index
    alive: np.ndarray       # (N,) bool

    def compact(self):
        keep = self.alive
        return ParticleSet(
            positions=self.positions[keep].copy(),
            velocities=self.velocities[keep].copy(),
            host=self.host[keep].copy(),
            alive=np.ones(int(keep.sum()), dtype=bool),
        )

    @property
    def alive_count(self):
        return int(self.alive.sum())


@dataclass
class PressureField:
    values: np.ndarray      # (V,), zero at free-surface vertices
    iterations: int = 0
    residual: float = 0.0


@dataclass
class StepDiagnostics:
    step: int
    particle_count: int
    max_divergence_pre: float
    max_divergence_post: float
    cg_iterations: int


# ---------------------------------------------------------------------------
# Particles
# ---------------------------------------------------------------------------

def sample_barycentric(rng, n):
    r = rng.random((n, 2))
    flip = r.sum(axis=1) > 1.0
    r[flip] = 1.0 - r[flip]
    return np.column_stack([1.0 - r.sum(axis=1), r[:, 0], r[:, 1]])


def _spawn(mesh, faces_idx, weights, n, rng, face_field=None):
    hosts = rng.choice(faces_idx, size=n, p=weights)
    lam = sample_barycentric(rng, n)
    pos = np.einsum("nk,nkj->nj", lam, mesh.vertices[mesh.triangles[hosts]])
    vel = face_field.w[hosts] if face_field is not None else np.zeros((n, 3))
    return pos, vel, hosts


def seed_particles(mesh: SurfaceMesh, config: SimConfig, faces: FaceVelocityField | None = None) -> ParticleSet:
    """Area-weighted random seeding over fluid faces, deterministic per seed."""
    fluid = mesh.fluid_faces
    if len(fluid) == 0:
        raise EmptyFluidRegion("mesh has no fluid faces to seed")
    rng = np.random.default_rng(config.seed)
    n = config.particles_per_face * len(fluid)
    weights = mesh.areas[fluid] / mesh.areas[fluid].sum()
    pos, vel, hosts = _spawn(mesh, fluid, weights, n, rng, faces)
    return ParticleSet(
        positions=pos, velocities=vel, host=hosts, alive=np.ones(n, dtype=bool)
    )


def classify_open_edges(mesh: SurfaceMesh, faces: FaceVelocityField) -> np.ndarray:
    """Per boundary edge: WALL stays WALL, OPEN becomes INWARD or OUTWARD by
    whether the adjacent face velocity crosses the edge into or out of the
    fluid region."""
    kinds = mesh.boundary_kind.astype(np.uint8).copy()
    open_idx = np.nonzero(kinds == OPEN)[0]
    if len(open_idx):
        w = faces.w[mesh.boundary_face[open_idx]]
        flux = np.einsum("ij,ij->i", w, mesh.boundary_normal[open_idx])
        kinds[open_idx] = np.where(flux < -1e-12, INWARD, OUTWARD)
    return kinds


def _wall_normals_per_face(mesh: SurfaceMesh):
    """Up to two in-plane outward wall normals per face (zero rows otherwise)."""
    F = len(mesh.triangles)
    n1 = np.zeros((F, 3))
    n2 = np.zeros((F, 3))
    has1 = np.zeros(F, dtype=bool)
    wall = mesh.boundary_kind == WALL
    for f, n in zip(mesh.boundary_face[wall], mesh.boundary_normal[wall]):
        if not has1[f]:
            n1[f] = n
            has1[f] = True
        else:
            n2[f] = n
    return n1, n2


def advect(
    particles: ParticleSet,
    mesh: SurfaceMesh,
    dt: float,
    edge_classes: np.ndarray | None = None,
) -> ParticleSet:
    """Euler step then reprojection onto the fluid surface.

    Wall-adjacent particles lose any outward wall-normal velocity before
    stepping; particles whose projection pins to an OUTWARD boundary edge
    while the raw step point left the surface are killed.
    """
    if edge_classes is None:
        edge_classes = mesh.boundary_kind
    alive = particles.alive
    v = particles.velocities.copy()

    n1, n2 = _wall_normals_per_face(mesh)
    for nmat in (n1, n2):
        nh = nmat[particles.host]
        out = np.einsum("ij,ij->i", v, nh)
        v -= np.clip(out, 0.0, None)[:, None] * nh
    particles.velocities = v

    moving = alive & (np.einsum("ij,ij->i", v, v) > 0.0)
    if not np.any(moving):
        return particles
    idx = np.nonzero(moving)[0]
    target = particles.positions[idx] + v[idx] * dt
    face, bary, dist2 = closest_point_batch(target, mesh, particles.host[idx])
    step_len = np.linalg.norm(v[idx] * dt, axis=1)
    off_surface = np.sqrt(dist2) > np.maximum(1e-9, 1e-4 * step_len)

    kill = np.zeros(len(idx), dtype=bool)
    if len(edge_classes):
        pinned = bary < 1e-6
        for j in range(3):
            slot = (j + 1) % 3  # edge opposite vertex j
            b = mesh.boundary_edge_index[face, slot]
            valid = pinned[:, j] & (b >= 0)
            kill |= valid & (edge_classes[np.clip(b, 0, None)] == OUTWARD) & off_surface

    particles.positions[idx] = np.einsum(
        "nk,nkj->nj", bary, mesh.vertices[mesh.triangles[face]]
    )
    particles.host[idx] = face
    particles.alive[idx] = ~kill
    return particles


def replenish(
    particles: ParticleSet,
    mesh: SurfaceMesh,
    config: SimConfig,
    faces: FaceVelocityField,
    edge_classes: np.ndarray,
    target_count: int,
    rng: np.random.Generator,
) -> ParticleSet:
    """Inject particles on faces behind INWARD edges to restore the count.

    Without any inflow edge this is a no-op and the deficit simply persists.
    """
    particles = particles.compact()
    deficit = target_count - particles.alive_count
    if deficit <= 0:
        return particles
    inward_faces = np.unique(mesh.boundary_face[edge_classes == INWARD])
    if len(inward_faces) == 0:
        return particles
    weights = mesh.areas[inward_faces] / mesh.areas[inward_faces].sum()
    pos, vel, hosts = _spawn(mesh, inward_faces, weights, deficit, rng, faces)
    return ParticleSet(
        positions=np.concatenate([particles.positions, pos]),
        velocities=np.concatenate([particles.velocities, vel]),
        host=np.concatenate([particles.host, hosts]),
        alive=np.concatenate([particles.alive, np.ones(deficit, dtype=bool)]),
    )


def particles_to_faces(particles: ParticleSet, mesh: SurfaceMesh) -> FaceVelocityField:
    """Mean hosted-particle velocity per fluid face, projected in-plane.

    Fluid faces left empty take the area-weighted mean of their filled
    edge-neighbors, propagated in rounds until everything is covered.
    """
    F = len(mesh.triangles)
    acc = np.zeros((F, 3))
    cnt = np.zeros(F)
    alive = particles.alive
    np.add.at(acc, particles.host[alive], particles.velocities[alive])
    np.add.at(cnt, particles.host[alive], 1.0)

    w = np.zeros((F, 3))
    filled = cnt > 0
    w[filled] = acc[filled] / cnt[filled, None]

    fluid = mesh.face_fluid
    filled &= fluid
    missing = fluid & ~filled
    while missing.any():
        nb = mesh.face_neighbors  # (F, 3)
        nb_ok = (nb >= 0) & filled[np.clip(nb, 0, None)]
        area_nb = np.where(nb_ok, mesh.areas[np.clip(nb, 0, None)], 0.0)
        wsum = np.einsum("fj,fjc->fc", area_nb, w[np.clip(nb, 0, None)])
        denom = area_nb.sum(axis=1)
        can = missing & (denom > 0)
        if not can.any():
            break
        w[can] = wsum[can] / denom[can, None]
        filled |= can
        missing &= ~can

    # keep only the in-plane component
    normal_comp = np.einsum("fj,fj->f", w, mesh.normals)
    w -= normal_comp[:, None] * mesh.normals
    w[~fluid] = 0.0
    coeffs = np.zeros((F, 2))
    coeffs[fluid] = face_coefficients(mesh, w)[fluid]
    return FaceVelocityField(w=w, coeffs=coeffs)


def enforce_wall_tangency(faces: FaceVelocityField, mesh: SurfaceMesh) -> FaceVelocityField:
    """Remove in-plane wall-normal velocity on faces bordering solid walls."""
    proj = mesh.wall_projector()
    wall_faces = np.unique(mesh.boundary_face[mesh.boundary_kind == WALL])
    if len(wall_faces) == 0:
        return faces
    faces.w[wall_faces] = np.einsum(
        "fij,fj->fi", proj[wall_faces], faces.w[wall_faces]
    )
    faces.coeffs[wall_faces] = face_coefficients(mesh, faces.w)[wall_faces]
    return faces


# ---------------------------------------------------------------------------
# Discrete operators
# ---------------------------------------------------------------------------

def vertex_divergence(faces: FaceVelocityField, mesh: SurfaceMesh) -> np.ndarray:
    """Divergence sample at every vertex from incident fluid faces.

    Contribution of face (a, b, c) with base-a coefficients (mu, lam):
    (mu + lam)/S at a, -mu/S at b, -lam/S at c (the coefficients rebased at
    each corner), which sums to zero over the face.
    """
    div = np.zeros(len(mesh.vertices))
    fl = mesh.fluid_faces
    tri = mesh.triangles[fl]
    mu = faces.coeffs[fl, 0]
    lam = faces.coeffs[fl, 1]
    s = mesh.areas[fl]
    np.add.at(div, tri[:, 0], (mu + lam) / s)
    np.add.at(div, tri[:, 1], -mu / s)
    np.add.at(div, tri[:, 2], -lam / s)
    return div


def face_gradient(pressure, mesh: SurfaceMesh) -> np.ndarray:
    """In-plane gradient of a per-vertex scalar, one 3D vector per face."""
    p = pressure.values if isinstance(pressure, PressureField) else np.asarray(pressure)
    tri = mesh.triangles
    rhs = np.stack([p[tri[:, 1]] - p[tri[:, 0]], p[tri[:, 2]] - p[tri[:, 0]]], axis=1)
    coeffs = np.einsum("fjk,fk->fj", mesh.ete_inv, rhs)
    return vectors_from_coefficients(mesh, coeffs)


def constrained_face_gradient(pressure, mesh: SurfaceMesh) -> np.ndarray:
    """face_gradient with wall-normal flux components zeroed per face."""
    g = face_gradient(pressure, mesh)
    return np.einsum("fij,fj->fi", mesh.wall_projector(), g)


def unknown_vertices(mesh: SurfaceMesh) -> np.ndarray:
    """Pressure unknowns: fluid-face vertices that are not free surface."""
    touched = np.zeros(len(mesh.vertices), dtype=bool)
    touched[mesh.triangles[mesh.face_fluid].ravel()] = True
    return touched & ~mesh.free_surface_vertex


def assemble_pressure_system(mesh: SurfaceMesh):
    """SPD matrix -L on the unknown set, where L = divergence o gradient
    (wall-constrained).  Cached on the mesh."""
    cached = getattr(mesh, "_pressure_system", None)
    if cached is not None:
        return cached
    unknown = unknown_vertices(mesh)
    index = -np.ones(len(mesh.vertices), dtype=np.int64)
    index[unknown] = np.arange(int(unknown.sum()))

    fl = mesh.fluid_faces
    E = mesh.edge_mats[fl]
    G3 = np.einsum("fij,fjk->fik", E, mesh.ete_inv[fl])        # (n, 3, 2)
    P = mesh.wall_projector()[fl]
    Q = np.einsum("fia,fij,fjb->fab", G3, P, G3)               # (n, 2, 2)
    M = np.einsum("ia,fab,jb->fij", _B, Q, _B) / mesh.areas[fl][:, None, None]

    tri = mesh.triangles[fl]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    vals = M.ravel()
    ri = index[rows]
    ci = index[cols]
    keep = (ri >= 0) & (ci >= 0)  # Dirichlet columns carry p = 0
    n = int(unknown.sum())
    A = sp.csr_matrix((vals[keep], (ri[keep], ci[keep])), shape=(n, n))
    A.sum_duplicates()

    # diagonal of the unconstrained operator: the yardstick for detecting
    # vertices whose equations the wall projector wiped out entirely
    dref_face = np.einsum("ia,fab,ib->fi", _B, mesh.ete_inv[fl], _B) / mesh.areas[fl][:, None]
    diag_ref = np.zeros(n)
    tri_idx = index[tri.ravel()]
    ok = tri_idx >= 0
    np.add.at(diag_ref, tri_idx[ok], dref_face.ravel()[ok])
    # connected components of the unknown graph; a component is anchored when
    # some Dirichlet column was dropped from it, which shows as a nonzero
    # row sum (L annihilates constants otherwise)
    from scipy.sparse.csgraph import connected_components

    ncomp, components = connected_components(A, directed=False)
    rowsum = np.abs(A @ np.ones(n)) if n else np.zeros(0)
    thresh = 1e-9 * (A.diagonal().max() if n else 1.0)
    anchored = np.zeros(max(ncomp, 1), dtype=bool)
    for comp in range(ncomp):
        anchored[comp] = bool(np.any(rowsum[components == comp] > thresh))
    mesh._pressure_system = (A, unknown, index, components, anchored, diag_ref)
    return mesh._pressure_system


def jacobi_cg(A, b, tol, max_iter):
    """Conjugate gradient with Jacobi preconditioning.

    Stops when the residual is below tol * ||b|| in both the 2- and max-norm
    (the max-norm guard keeps the post-projection divergence bound uniform).
    """
    norm_b2 = np.linalg.norm(b)
    if norm_b2 == 0.0:
        return np.zeros_like(b), 0, 0.0
    norm_binf = np.abs(b).max()
    diag = A.diagonal()
    diag = np.where(diag > 0, diag, 1.0)
    x = np.zeros_like(b)
    r = b.copy()
    z = r / diag
    p = z.copy()
    rz = r @ z
    it = 0
    for it in range(1, max_iter + 1):
        Ap = A @ p
        denom = p @ Ap
        if denom <= 0:
            break
        alpha = rz / denom
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * norm_b2 and np.abs(r).max() <= tol * norm_binf:
            return x, it, float(np.linalg.norm(r) / norm_b2)
        z = r / diag
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    rel = float(np.linalg.norm(r) / norm_b2)
    if rel >= 1.0:
        raise SolverDiverged(f"pressure CG failed to reduce the residual (rel {rel:.3g})")
    return x, it, rel


def solve_pressure(divergence: np.ndarray, mesh: SurfaceMesh, config: SimConfig) -> PressureField:
    """Solve L p = (rho/dt) div with p = 0 at free-surface vertices and
    zero flux through walls.

    Disconnected fluid components are gauge-fixed independently: a component
    with no free-surface anchor gets its RHS mean removed (raising
    SingularSystem when the mean is genuinely incompatible) and one vertex
    pinned to zero.
    """
    A, unknown, index, components, anchored, diag_ref = assemble_pressure_system(mesh)
    b = -(config.rho / config.dt) * divergence[unknown]
    n = A.shape[0]
    keep = np.ones(n, dtype=bool)
    if n:
        diag = A.diagonal()
        # wall-locked vertices (projector killed every incident gradient):
        # no equation can move their divergence, pin them out
        keep &= diag > 1e-12 * diag_ref
        b = np.where(keep, b, 0.0)
        scale = np.abs(b).max()
        for comp in range(components.max() + 1 if len(components) else 0):
            members = components == comp
            if anchored[comp] or not members.any():
                continue
            bc = b[members]
            # incompatible only when the mean stands clear of both the
            # component's own cancellation noise and the global scale
            if abs(bc.sum()) > max(1e-8 * np.abs(bc).sum(), 1e-10 * scale):
                raise SingularSystem(
                    "all-Neumann pressure component with incompatible (nonzero-mean) RHS"
                )
            b[members] = bc - bc.mean()
            keep[np.nonzero(members)[0][0]] = False  # pin the gauge

    if keep.all():
        sol, it, rel = jacobi_cg(A, b, config.solver_tol, config.solver_max_iter)
    else:
        Ar = A[keep][:, keep]
        x, it, rel = jacobi_cg(Ar, b[keep], config.solver_tol, config.solver_max_iter)
        sol = np.zeros(n)
        sol[keep] = x

    values = np.zeros(len(mesh.vertices))
    values[unknown] = sol
    return PressureField(values=values, iterations=it, residual=rel)


def project_velocities(
    faces: FaceVelocityField,
    pressure: PressureField,
    mesh: SurfaceMesh,
    config: SimConfig,
) -> FaceVelocityField:
    """w* = w - beta (dt/rho) grad p, using the wall-constrained gradient so
    the correction stays consistent with the assembled Laplacian."""
    if config.beta == 0.0:
        return faces.copy()
    g = constrained_face_gradient(pressure, mesh)
    scale = config.beta * config.dt / config.rho
    w = faces.w.copy()
    fluid = mesh.face_fluid
    w[fluid] -= scale * g[fluid]
    coeffs = faces.coeffs.copy()
    coeffs[fluid] = face_coefficients(mesh, w)[fluid]
    return FaceVelocityField(w=w, coeffs=coeffs, degenerate=faces.degenerate.copy())


# ---------------------------------------------------------------------------
# Time stepping
# ---------------------------------------------------------------------------

@dataclass
class SimState:
    mesh: SurfaceMesh
    particles: ParticleSet
    faces: FaceVelocityField
    config: SimConfig
    rng: np.random.Generator
    seeded_count: int
    step_index: int = 0
    diagnostics: list = field(default_factory=list)

    @staticmethod
    def initialize(mesh: SurfaceMesh, faces: FaceVelocityField, config: SimConfig) -> "SimState":
        # the solver's domain is the fluid sub-mesh
        faces = FaceVelocityField(
            w=np.where(mesh.face_fluid[:, None], faces.w, 0.0),
            coeffs=np.where(mesh.face_fluid[:, None], faces.coeffs, 0.0),
            degenerate=faces.degenerate.copy(),
        )
        particles = seed_particles(mesh, config, faces)
        return SimState(
            mesh=mesh,
            particles=particles,
            faces=faces,
            config=config,
            rng=np.random.default_rng(config.seed + 1),
            seeded_count=particles.alive_count,
        )


def step(state: SimState) -> StepDiagnostics:
    """Advance one frame in place; returns (and records) the diagnostics."""
    mesh, cfg = state.mesh, state.config
    classes = classify_open_edges(mesh, state.faces)
    advect(state.particles, mesh, cfg.dt, classes)
    state.particles = replenish(
        state.particles, mesh, cfg, state.faces, classes, state.seeded_count, state.rng
    )
    g = cfg.gravity_vector()
    if np.any(g != 0.0):
        state.particles.velocities += g * cfg.dt

    faces = particles_to_faces(state.particles, mesh)
    enforce_wall_tangency(faces, mesh)
    div = vertex_divergence(faces, mesh)
    unknown = unknown_vertices(mesh)
    pre = float(np.abs(div[unknown]).max()) if unknown.any() else 0.0

    pressure = solve_pressure(div, mesh, cfg)
    faces = project_velocities(faces, pressure, mesh, cfg)
    div_post = vertex_divergence(faces, mesh)
    post = float(np.abs(div_post[unknown]).max()) if unknown.any() else 0.0

    # pure PIC transfer back to particles
    state.particles.velocities = faces.w[state.particles.host].copy()
    state.faces = faces
    state.step_index += 1
    diag = StepDiagnostics(
        step=state.step_index,
        particle_count=state.particles.alive_count,
        max_divergence_pre=pre,
        max_divergence_post=post,
        cg_iterations=pressure.iterations,
    )
    state.diagnostics.append(diag)
    return diag

"""Triangular surface mesh built from a depth map by perspective unprojection.

Vertices sit on a regular pixel grid (every `stride`-th pixel), each quad is
split into two triangles along its main diagonal, and triangles spanning a
depth discontinuity or with vanishing area are dropped.  Per-triangle edge
matrices E = [b-a, c-a] and areas are precomputed because every downstream
operator (velocity lift, divergence, pressure gradient) is expressed in the
edge basis.

Coordinate convention: pixel (u, v) with top-left origin and y-down maps to

    x = (u - cx) / fx * d,   y = -(v - cy) / fy * d,   z = d

so 3D y points up while raster v grows down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateTriangle, EmptyFluidRegion
from .scene_io import CameraIntrinsics

# vertex labels
SOLID = 0
FLUID = 1
AIR = 2

# boundary edge kinds
WALL = 0
OPEN = 1
# per-step classification of OPEN edges
INWARD = 2
OUTWARD = 3

EPS_AREA = 1e-12
DEPTH_RATIO_LIMIT = 1.5
BASIS_COND_LIMIT = 1e12


def unproject(pixel, depth, intrinsics: CameraIntrinsics):
    """Map pixel coordinates (u, v) at depth d to a 3D point.

    Accepts scalars or arrays; depth must be positive.
    """
    u, v = pixel
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    x = (u - intrinsics.cx) / intrinsics.fx * d
    y = -(v - intrinsics.cy) / intrinsics.fy * d
    return np.stack(np.broadcast_arrays(x, y, d), axis=-1)


def project(points, intrinsics: CameraIntrinsics):
    """Pinhole projection of (..., 3) points back to pixel (u, v)."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    u = intrinsics.cx + intrinsics.fx * pts[..., 0] / z
    v = intrinsics.cy - intrinsics.fy * pts[..., 1] / z
    return np.stack([u, v], axis=-1)


@dataclass
class BarycentricLocation:
    triangle: int
    lambdas: np.ndarray  # (3,), sum to one, nonnegative

    def point(self, mesh: "SurfaceMesh"):
        verts = mesh.vertices[mesh.triangles[self.triangle]]
        return self.lambdas @ verts


@dataclass
class SurfaceMesh:
    """Immutable triangle mesh plus everything the solver precomputes."""

    vertices: np.ndarray          # (V, 3)
    triangles: np.ndarray         # (F, 3) int
    pixel_of_vertex: np.ndarray   # (V, 2) source pixel (u, v)
    vertex_flags: np.ndarray      # (V,) FLUID/SOLID
    face_fluid: np.ndarray        # (F,) bool

    edge_mats: np.ndarray = field(init=False)    # (F, 3, 2) columns b-a, c-a
    ete_inv: np.ndarray = field(init=False)      # (F, 2, 2) inverse metric
    areas: np.ndarray = field(init=False)        # (F,)
    normals: np.ndarray = field(init=False)      # (F, 3) unit
    centroids: np.ndarray = field(init=False)    # (F, 3)

    face_neighbors: np.ndarray = field(init=False)   # (F, 3) across edge (j, j+1), -1 if none
    boundary_v0: np.ndarray = field(init=False)
    boundary_v1: np.ndarray = field(init=False)
    boundary_face: np.ndarray = field(init=False)
    boundary_kind: np.ndarray = field(init=False)    # WALL or OPEN
    boundary_normal: np.ndarray = field(init=False)  # (B, 3) in-plane outward unit
    free_surface_vertex: np.ndarray = field(init=False)  # (V,) bool

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.vertex_flags = np.asarray(self.vertex_flags, dtype=np.uint8)
        self.face_fluid = np.asarray(self.face_fluid, dtype=bool)
        tri = self.vertices[self.triangles]  # (F, 3, 3)
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        self.edge_mats = np.stack([e1, e2], axis=-1)
        cross = np.cross(e1, e2)
        norm = np.linalg.norm(cross, axis=1)
        if np.any(norm <= 2 * EPS_AREA):
            raise DegenerateTriangle("mesh contains a zero-area triangle")
        self.areas = 0.5 * norm
        self.normals = cross / norm[:, None]
        self.centroids = tri.mean(axis=1)
        ete = np.einsum("fij,fik->fjk", self.edge_mats, self.edge_mats)
        det = ete[:, 0, 0] * ete[:, 1, 1] - ete[:, 0, 1] * ete[:, 1, 0]
        inv = np.empty_like(ete)
        inv[:, 0, 0] = ete[:, 1, 1]
        inv[:, 1, 1] = ete[:, 0, 0]
        inv[:, 0, 1] = -ete[:, 0, 1]
        inv[:, 1, 0] = -ete[:, 1, 0]
        self.ete_inv = inv / det[:, None, None]
        self._ete = ete
        self._build_adjacency()
        self._classify_boundaries()
        self._tree = cKDTree(self.centroids)
        self._r_max = float(np.max(np.linalg.norm(tri - self.centroids[:, None, :], axis=2)))
        self._fluid_tree = None
        self._wall_projectors = None

    # -- adjacency -----------------------------------------------------------

    def _build_adjacency(self):
        F = len(self.triangles)
        V = len(self.vertices)
        # vertex -> incident faces as CSR
        vi = self.triangles.ravel()
        fi = np.repeat(np.arange(F), 3)
        order = np.argsort(vi, kind="stable")
        self._v2f_data = fi[order]
        counts = np.bincount(vi, minlength=V)
        self._v2f_offsets = np.concatenate([[0], np.cumsum(counts)])

        # face neighbor across each directed edge (j, j+1)
        edges = np.stack(
            [self.triangles, np.roll(self.triangles, -1, axis=1)], axis=-1
        ).reshape(-1, 2)  # (3F, 2)
        keys = np.sort(edges, axis=1)
        flat = keys[:, 0] * V + keys[:, 1]
        order = np.argsort(flat, kind="stable")
        sorted_keys = flat[order]
        face_of = order // 3
        self.face_neighbors = -np.ones((F, 3), dtype=np.int64)
        # group equal keys (an edge is shared by at most 2 faces on a manifold grid)
        same_next = np.zeros(len(sorted_keys), dtype=bool)
        same_next[:-1] = sorted_keys[:-1] == sorted_keys[1:]
        i = np.nonzero(same_next)[0]
        slot_a = order[i] % 3
        slot_b = order[i + 1] % 3
        fa, fb = face_of[i], face_of[i + 1]
        self.face_neighbors[fa, slot_a] = fb
        self.face_neighbors[fb, slot_b] = fa

        # padded 1-ring of faces around each face (shares >= 1 vertex, incl. self)
        rings = []
        for f in range(F):
            ring = set()
            for v in self.triangles[f]:
                s, e = self._v2f_offsets[v], self._v2f_offsets[v + 1]
                ring.update(self._v2f_data[s:e].tolist())
            rings.append(sorted(ring))
        k = max(len(r) for r in rings)
        self.face_rings = -np.ones((F, k), dtype=np.int64)
        for f, r in enumerate(rings):
            self.face_rings[f, : len(r)] = r

    def vertex_faces(self, v: int):
        s, e = self._v2f_offsets[v], self._v2f_offsets[v + 1]
        return self._v2f_data[s:e]

    # -- boundaries ----------------------------------------------------------

    def _classify_boundaries(self):
        """Boundary edges of the fluid sub-mesh.

        An edge of a fluid face is a boundary edge when the face across it is
        not fluid.  It is a WALL when that neighbor exists (solid scene
        geometry), an OPEN edge when there is nothing across (image border or
        a dropped occlusion triangle).
        """
        v0, v1, faces, kinds, normals = [], [], [], [], []
        fluid = self.face_fluid
        self.boundary_edge_index = -np.ones((len(self.triangles), 3), dtype=np.int64)
        for f in np.nonzero(fluid)[0]:
            for j in range(3):
                nb = self.face_neighbors[f, j]
                if nb >= 0 and fluid[nb]:
                    continue
                a = self.triangles[f, j]
                b = self.triangles[f, (j + 1) % 3]
                kind = WALL if nb >= 0 else OPEN
                edge = self.vertices[b] - self.vertices[a]
                n = np.cross(edge, self.normals[f])
                n /= max(np.linalg.norm(n), 1e-300)
                mid = 0.5 * (self.vertices[a] + self.vertices[b])
                if np.dot(n, self.centroids[f] - mid) > 0:
                    n = -n
                self.boundary_edge_index[f, j] = len(v0)
                v0.append(a)
                v1.append(b)
                faces.append(f)
                kinds.append(kind)
                normals.append(n)
        self.boundary_v0 = np.array(v0, dtype=np.int64)
        self.boundary_v1 = np.array(v1, dtype=np.int64)
        self.boundary_face = np.array(faces, dtype=np.int64)
        self.boundary_kind = np.array(kinds, dtype=np.uint8)
        self.boundary_normal = (
            np.array(normals) if normals else np.zeros((0, 3))
        )
        self.free_surface_vertex = np.zeros(len(self.vertices), dtype=bool)
        open_edges = self.boundary_kind == OPEN
        self.free_surface_vertex[self.boundary_v0[open_edges]] = True
        self.free_surface_vertex[self.boundary_v1[open_edges]] = True

    def wall_projector(self, fallback_identity=True):
        """Per-face 3x3 projector removing in-plane wall-normal components.

        Faces with no WALL edge keep the identity; faces with two or more
        independent wall normals lose their whole in-plane space.
        """
        if self._wall_projectors is None:
            F = len(self.triangles)
            proj = np.broadcast_to(np.eye(3), (F, 3, 3)).copy()
            wall = self.boundary_kind == WALL
            for face, n in zip(self.boundary_face[wall], self.boundary_normal[wall]):
                p = proj[face]
                m = p @ n
                norm = np.linalg.norm(m)
                if norm > 1e-9:
                    m = m / norm
                    proj[face] = p - np.outer(m, m)
            self._wall_projectors = proj
        return self._wall_projectors

    # -- queries --------------------------------------------------------------

    @property
    def fluid_faces(self):
        return np.nonzero(self.face_fluid)[0]

    def _get_fluid_tree(self):
        if self._fluid_tree is None:
            idx = self.fluid_faces
            self._fluid_tree = (cKDTree(self.centroids[idx]), idx)
        return self._fluid_tree

    def num_vertices(self):
        return len(self.vertices)

    def num_faces(self):
        return len(self.triangles)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def build_mesh(
    depth: np.ndarray,
    fluid_mask: np.ndarray,
    intrinsics: CameraIntrinsics,
    stride: int = 4,
    depth_ratio_limit: float = DEPTH_RATIO_LIMIT,
) -> SurfaceMesh:
    """Triangulate every stride-th pixel of the depth map.

    Triangles whose max/min vertex depth ratio exceeds the limit are treated
    as occlusion boundaries and dropped, as are numerically degenerate ones.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    gh, gw = len(rows), len(cols)
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    d = depth[vv, uu]
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    verts = unproject((pixels[:, 0], pixels[:, 1]), d.ravel(), intrinsics)
    flags = np.where(fluid_mask[vv, uu].ravel(), FLUID, SOLID).astype(np.uint8)

    idx = np.arange(gh * gw).reshape(gh, gw)
    v00 = idx[:-1, :-1].ravel()
    v01 = idx[:-1, 1:].ravel()
    v10 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    tris = np.concatenate(
        [
            np.stack([v00, v10, v11], axis=1),
            np.stack([v00, v11, v01], axis=1),
        ]
    )
    # interleave the two triangles of each quad to keep ordering local
    order = np.argsort(np.concatenate([v00, v00]), kind="stable")
    tris = tris[order]

    tv = verts[tris]
    e1 = tv[:, 1] - tv[:, 0]
    e2 = tv[:, 2] - tv[:, 0]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    dep = tv[:, :, 2]
    ratio = dep.max(axis=1) / dep.min(axis=1)
    keep = (area > EPS_AREA) & (ratio <= depth_ratio_limit)
    tris = tris[keep]

    face_fluid = np.all(flags[tris] == FLUID, axis=1)
    if not np.any(face_fluid):
        raise EmptyFluidRegion("fluid mask yields no fluid triangle")

    mesh = SurfaceMesh(
        vertices=verts,
        triangles=tris,
        pixel_of_vertex=pixels,
        vertex_flags=flags,
        face_fluid=face_fluid,
    )
    mesh.grid_shape = (gh, gw)
    mesh.stride = stride
    return mesh


# ---------------------------------------------------------------------------
# Closest point
# ---------------------------------------------------------------------------

def closest_point_on_triangles(points: np.ndarray, tri_verts: np.ndarray):
    """Closest point on each triangle to each query point, vectorized.

    points: (N, 3); tri_verts: (N, 3, 3).  Returns (bary (N, 3), dist2 (N,)).
    Region tests follow the classic primitive-by-primitive case analysis.
    """
    a, b, c = tri_verts[:, 0], tri_verts[:, 1], tri_verts[:, 2]
    p = points
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    bary = np.empty((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, l0, l1, l2):
        m = mask & ~done
        bary[m, 0] = np.broadcast_to(l0, (n,))[m] if np.ndim(l0) else l0
        bary[m, 1] = np.broadcast_to(l1, (n,))[m] if np.ndim(l1) else l1
        bary[m, 2] = np.broadcast_to(l2, (n,))[m] if np.ndim(l2) else l2
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)                    # vertex a
        assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)                   # vertex b
        assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)                   # vertex c
        t = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t, t, 0.0)      # edge ab
        t = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t, 0.0, t)      # edge ac
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 0.0, 1.0 - t, t)  # edge bc
        denom = va + vb + vc
        v = vb / denom
        wcoef = vc / denom
        assign(~done, 1.0 - v - wcoef, v, wcoef)                        # interior

    closest = np.einsum("nk,nkj->nj", bary, tri_verts)
    diff = closest - p
    return bary, np.einsum("ij,ij->i", diff, diff)


def _best_over_candidates(mesh, points, cand):
    """Exact closest point over per-point candidate face lists (padded -1)."""
    n, k = cand.shape
    flat = cand.ravel()
    valid = flat >= 0
    tri = np.zeros((n * k, 3, 3))
    tri[valid] = mesh.vertices[mesh.triangles[flat[valid]]]
    pts = np.repeat(points, k, axis=0)
    bary, dist2 = closest_point_on_triangles(pts, tri)
    dist2 = np.where(valid, dist2, np.inf).reshape(n, k)
    pick = np.argmin(dist2, axis=1)
    rows = np.arange(n)
    best_face = cand[rows, pick]
    best_bary = bary.reshape(n, k, 3)[rows, pick]
    best_d2 = dist2[rows, pick]
    return best_face, best_bary, best_d2


def closest_point_on_mesh(
    query,
    mesh: SurfaceMesh,
    hint_triangle: int | None = None,
    fluid_only: bool = False,
) -> BarycentricLocation:
    """Globally nearest point on the mesh, as a barycentric location.

    Starts from the hint triangle's neighborhood when given, then verifies
    global optimality with a ball query on the centroid index: any triangle
    containing a closer point must have its centroid within best + r_max.
    """
    q = np.asarray(query, dtype=np.float64).reshape(1, 3)
    if fluid_only:
        tree, idx_map = mesh._get_fluid_tree()
    else:
        tree, idx_map = mesh._tree, None

    if hint_triangle is not None:
        cand = mesh.face_rings[hint_triangle][None, :].copy()
        if fluid_only:
            cand[0, ~mesh.face_fluid[np.clip(cand[0], 0, None)]] = -1
        if np.all(cand < 0):
            hint_triangle = None
    if hint_triangle is None:
        _, seed = tree.query(q[0])
        seed_face = idx_map[seed] if idx_map is not None else seed
        cand = np.array([[seed_face]])

    face, bary, d2 = _best_over_candidates(mesh, q, cand)
    radius = np.sqrt(d2[0]) + mesh._r_max + 1e-12
    ball = tree.query_ball_point(q[0], radius)
    if ball:
        ball = np.asarray(ball)
        if idx_map is not None:
            ball = idx_map[ball]
        face2, bary2, d22 = _best_over_candidates(mesh, q, ball[None, :])
        if d22[0] < d2[0]:
            face, bary = face2, bary2
    return BarycentricLocation(triangle=int(face[0]), lambdas=bary[0])


def closest_point_batch(points, mesh: SurfaceMesh, hosts, fluid_only=True, max_grow=8):
    """Reproject many points onto the mesh, seeded by their host faces.

    Searches each host's one-ring, re-centering the ring on the current best
    face while the optimum keeps landing on an edge whose neighbor was not a
    candidate (the particle outran the ring).  Stragglers after `max_grow`
    re-centerings get an exact global query.
    """
    points = np.asarray(points, dtype=np.float64)
    hosts = np.asarray(hosts)
    n = len(points)
    face = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3))
    dist2 = np.empty(n)
    active = np.arange(n)
    seeds = hosts.copy()
    allowed = mesh.face_fluid if fluid_only else np.ones(len(mesh.triangles), dtype=bool)

    for _ in range(max_grow):
        cand = mesh.face_rings[seeds[active]].copy()
        bad = (cand < 0) | ~allowed[np.clip(cand, 0, None)]
        cand[bad] = -1
        f, b, d2 = _best_over_candidates(mesh, points[active], cand)
        face[active], bary[active], dist2[active] = f, b, d2
        # did the optimum pin to a ring-exterior edge?
        pinned = b < 1e-12  # (m, 3) true where a barycentric hit zero
        needs = np.zeros(len(active), dtype=bool)
        for j in range(3):
            # lambda_j == 0 means the point sits on the edge opposite vertex j,
            # i.e. directed edge (j+1, j+2); ring must contain that neighbor
            edge_slot = (j + 1) % 3
            nb = mesh.face_neighbors[f, edge_slot]
            outside = pinned[:, j] & (nb >= 0) & allowed[np.clip(nb, 0, None)]
            in_ring = (cand == nb[:, None]).any(axis=1)
            needs |= outside & ~in_ring
        if not np.any(needs):
            active = active[:0]
            break
        seeds[active] = f  # re-center ring on current best
        active = active[needs]
    for i in active:  # rare stragglers: exact query
        loc = closest_point_on_mesh(points[i], mesh, fluid_only=fluid_only)
        face[i], bary[i] = loc.triangle, loc.lambdas
        diff = loc.point(mesh) - points[i]
        dist2[i] = diff @ diff
    return face, bary, dist2


# ---------------------------------------------------------------------------
# Edge-basis solve
# ---------------------------------------------------------------------------

def triangle_basis_solve(mesh: SurfaceMesh, face: int, rhs):
    """Coefficients (mu, lam) with E @ (mu, lam) ~ rhs in the least-squares
    sense; the component of rhs along the face normal is discarded."""
    ete = mesh._ete[face]
    cond = np.linalg.cond(ete)
    if not np.isfinite(cond) or cond > BASIS_COND_LIMIT:
        raise DegenerateTriangle(f"face {face} edge metric condition {cond:.3g}")
    rhs = np.asarray(rhs, dtype=np.float64)
    return np.linalg.solve(ete, mesh.edge_mats[face].T @ rhs)


def face_coefficients(mesh: SurfaceMesh, vectors: np.ndarray):
    """(mu, lam) for one 3D vector per face, vectorized basis solve."""
    proj = np.einsum("fij,fi->fj", mesh.edge_mats, vectors)
    return np.einsum("fjk,fk->fj", mesh.ete_inv, proj)


def vectors_from_coefficients(mesh: SurfaceMesh, coeffs: np.ndarray):
    return np.einsum("fij,fj->fi", mesh.edge_mats, coeffs)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def export_obj(mesh: SurfaceMesh, path):
    """Write vertices and faces as Wavefront OBJ (1-based indices)."""
    lines = ["# stillflow surface mesh"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    text = "\n".join(lines) + "\n"
    if path is None:
        return text
    with open(path, "w") as f:
        f.write(text)
    return text

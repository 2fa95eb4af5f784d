"""Insert solid objects into the scene and carve them out of the fluid.

The object and the scene mesh are both depth-rasterized; pixels where the
object wins the depth test go in front of the fluid layer, the rest behind
the background.  Fluid triangles under the submerged silhouette are
relabelled solid, which turns the new fluid/solid interface into WALL
boundary edges for the solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingFile, ObjectOutOfFrame
from .lift import rasterize_faces, rasterize_triangles
from .mesh import SurfaceMesh, unproject
from .render import LayerStack
from .scene_io import CameraIntrinsics, SceneBundle
from .sim import FaceVelocityField, SimState, face_coefficients

# bias the depth test toward the object so the waterline does not z-fight
DEPTH_BIAS = 1e-4


@dataclass
class InsertedObject:
    vertices: np.ndarray    # (N, 3) scene coordinates, meters
    triangles: np.ndarray   # (M, 3)
    color: np.ndarray = field(default=None)  # flat RGBA render color

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.color is None:
            self.color = np.array([0.5, 0.5, 0.5, 1.0])
        self.color = np.asarray(self.color, dtype=np.float64)

    def transformed(self, rotation=None, translation=None) -> "InsertedObject":
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return InsertedObject(v, self.triangles.copy(), self.color.copy())


def make_sphere(center, radius, rings=16, segments=24, color=None) -> InsertedObject:
    """UV sphere; dense enough that the rasterized waterline is sub-pixel."""
    center = np.asarray(center, dtype=np.float64)
    verts = []
    tris = []
    for i in range(rings + 1):
        theta = np.pi * i / rings
        for j in range(segments):
            phi = 2 * np.pi * j / segments
            verts.append(
                center
                + radius
                * np.array(
                    [np.sin(theta) * np.cos(phi), np.cos(theta), np.sin(theta) * np.sin(phi)]
                )
            )
    def vid(i, j):
        return i * segments + (j % segments)
    for i in range(rings):
        for j in range(segments):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            if i > 0:
                tris.append([a, b, d])
            if i < rings - 1:
                tris.append([b, c, d])
    return InsertedObject(np.array(verts), np.array(tris), color)


def make_box(center, size, color=None) -> InsertedObject:
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(size, dtype=np.float64) / 2.0
    corners = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    ) * half + center
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # x- x+
        (0, 4, 5, 1), (2, 3, 7, 6),  # y- y+
        (0, 2, 6, 4), (1, 5, 7, 3),  # z- z+
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append([a, b, c])
        tris.append([a, c, d])
    return InsertedObject(corners, np.array(tris), color)


def load_obj(path, color=None) -> InsertedObject:
    """Minimal Wavefront OBJ reader (v and triangulated f records)."""
    verts, tris = [], []
    try:
        lines = open(path).read().splitlines()
    except FileNotFoundError:
        raise MissingFile(f"no such OBJ file: {path}", asset=str(path))
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
    return InsertedObject(np.array(verts), np.array(tris), color)


def place_primitive(scene: SceneBundle, kind: str, at, radius=None, size=None,
                    color=None, obj_path=None) -> InsertedObject:
    """Drop a primitive at pixel (u, v), centered on the scene surface there."""
    u, v = at
    d = float(scene.depth[int(round(v)), int(round(u))])
    center = unproject((u, v), d, scene.intrinsics)
    if kind == "sphere":
        return make_sphere(center, radius if radius is not None else 0.05 * d, color=color)
    if kind == "box":
        s = size if size is not None else 0.1 * d
        s = np.broadcast_to(np.asarray(s, dtype=np.float64), (3,))
        return make_box(center, s, color=color)
    if kind == "obj":
        obj = load_obj(obj_path, color=color)
        return obj.transformed(translation=center - obj.vertices.mean(axis=0))
    raise ValueError(f"unknown primitive kind '{kind}'")


@dataclass
class OcclusionSplit:
    above_mask: np.ndarray      # object in front of the scene surface
    below_mask: np.ndarray      # object behind it
    contact_faces: np.ndarray   # fluid faces under the submerged silhouette


def classify_occlusion(
    obj: InsertedObject,
    mesh: SurfaceMesh,
    intrinsics: CameraIntrinsics,
    shape,
) -> OcclusionSplit:
    """Depth-compare the rasterized object against the scene surface."""
    _, _, obj_depth = rasterize_triangles(obj.vertices, obj.triangles, intrinsics, shape)
    silhouette = np.isfinite(obj_depth)
    if not silhouette.any():
        raise ObjectOutOfFrame("object projects entirely outside the frame")
    _, _, scene_depth = rasterize_faces(mesh, intrinsics, shape)
    above = silhouette & (obj_depth - DEPTH_BIAS < scene_depth)
    below = silhouette & ~above

    fluid_id, _, _ = rasterize_faces(mesh, intrinsics, shape, face_subset=mesh.fluid_faces)
    contact = np.unique(fluid_id[below & (fluid_id >= 0)])
    return OcclusionSplit(above_mask=above, below_mask=below, contact_faces=contact)


def cut_mesh(mesh: SurfaceMesh, contact_faces) -> SurfaceMesh:
    """Relabel contact faces solid; geometry and indexing stay put, so only
    boundary classification changes.  Empty contact set returns the mesh."""
    contact_faces = np.asarray(contact_faces, dtype=np.int64)
    if len(contact_faces) == 0 or not np.any(mesh.face_fluid[contact_faces]):
        return mesh
    face_fluid = mesh.face_fluid.copy()
    face_fluid[contact_faces] = False
    return SurfaceMesh(
        vertices=mesh.vertices,
        triangles=mesh.triangles,
        pixel_of_vertex=mesh.pixel_of_vertex,
        vertex_flags=mesh.vertex_flags,
        face_fluid=face_fluid,
    )


def apply_edit(
    scene: SceneBundle,
    obj: InsertedObject,
    sim_state: SimState,
    layers: LayerStack | None = None,
):
    """Classify, cut, restyle layers and restart the solver on the cut mesh.

    Surviving particles (hosts untouched by the cut) carry over so the flow
    does not visibly reset; the inflow bookkeeping re-targets the smaller
    fluid region.
    """
    mesh = sim_state.mesh
    split = classify_occlusion(obj, mesh, scene.intrinsics, scene.shape)
    new_mesh = cut_mesh(mesh, split.contact_faces)

    if layers is None:
        layers = LayerStack.from_scene(scene)
    fluid0 = layers.fluid0.copy()
    fluidn = layers.fluidn.copy()
    background = layers.background.copy()
    fluid0[split.above_mask, :3] = obj.color[:3]
    fluid0[split.above_mask, 3] = 1.0
    fluidn[split.above_mask, :3] = obj.color[:3]
    fluidn[split.above_mask, 3] = 1.0
    background[split.below_mask, :3] = obj.color[:3]
    new_layers = LayerStack(
        fluid0=fluid0, fluidn=fluidn, background=background,
        z0=layers.z0.copy(), zn=layers.zn.copy(),
    )

    if new_mesh is mesh:
        return mesh, new_layers, sim_state

    particles = sim_state.particles.compact()
    survivors = new_mesh.face_fluid[particles.host]
    particles.alive = survivors
    particles = particles.compact()

    faces = FaceVelocityField(
        w=np.where(new_mesh.face_fluid[:, None], sim_state.faces.w, 0.0),
        coeffs=np.where(new_mesh.face_fluid[:, None], sim_state.faces.coeffs, 0.0),
    )
    target = sim_state.config.particles_per_face * int(new_mesh.face_fluid.sum())
    new_state = SimState(
        mesh=new_mesh,
        particles=particles,
        faces=faces,
        config=sim_state.config,
        rng=sim_state.rng,
        seeded_count=target,
        step_index=sim_state.step_index,
        diagnostics=list(sim_state.diagnostics),
    )
    return new_mesh, new_layers, new_state

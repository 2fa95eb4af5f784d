"""End-to-end orchestration shared by the CLI and the HTTP service.

scene -> mesh -> densified hints -> lifted face velocities -> warmup steps ->
per-frame simulated motion fields -> rendered frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lift import lift_flow, rasterize_surface_motion
from .mesh import SurfaceMesh, build_mesh
from .motion import densify_hints
from .render import DEFAULT_FRAMES, FrameSequence, LayerStack, render_sequence
from .scene_io import MotionField, SceneBundle
from .sim import SimConfig, SimState, step

DEFAULT_WARMUP = 10
DEFAULT_STRIDE = 4


@dataclass
class SimulationRun:
    state: SimState
    fields: list = field(default_factory=list)     # MotionField per emitted frame
    canonical: MotionField | None = None           # post-warmup field for rendering


def scene_mesh(scene: SceneBundle, stride: int = DEFAULT_STRIDE) -> SurfaceMesh:
    return build_mesh(scene.depth, scene.fluid_mask, scene.intrinsics, stride=stride)


def initial_motion(scene: SceneBundle, sigma: float | None = None) -> MotionField:
    return densify_hints(scene.hints, scene.fluid_mask, sigma=sigma)


def simulate(
    scene: SceneBundle,
    config: SimConfig,
    frames: int,
    warmup: int = DEFAULT_WARMUP,
    stride: int = DEFAULT_STRIDE,
    sigma: float | None = None,
    mesh: SurfaceMesh | None = None,
    initial: MotionField | None = None,
    progress=None,
) -> SimulationRun:
    """Warm the solver up, then emit one rasterized motion field per frame.

    The post-warmup field is the canonical motion handed to the renderer;
    `progress(step_index, diagnostics)` fires after every solver step.
    """
    if mesh is None:
        mesh = scene_mesh(scene, stride=stride)
    if initial is None:
        initial = initial_motion(scene, sigma=sigma)
    faces = lift_flow(initial, mesh, scene.intrinsics)
    state = SimState.initialize(mesh, faces, config)
    run = SimulationRun(state=state)

    for _ in range(warmup):
        diag = step(state)
        if progress:
            progress(diag)
    run.canonical = rasterize_surface_motion(state.faces, mesh, scene.intrinsics, scene.shape)
    for _ in range(frames):
        diag = step(state)
        if progress:
            progress(diag)
        run.fields.append(
            rasterize_surface_motion(state.faces, mesh, scene.intrinsics, scene.shape)
        )
    return run


def render(
    scene: SceneBundle,
    motion: MotionField,
    frames: int = DEFAULT_FRAMES,
    cyclic: bool = True,
    layers: LayerStack | None = None,
) -> FrameSequence:
    if layers is None:
        layers = LayerStack.from_scene(scene)
    return render_sequence(layers, motion, n=frames, cyclic=cyclic)

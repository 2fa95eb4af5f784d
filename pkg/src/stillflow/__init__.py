"""stillflow: animate the fluid regions of a still photograph.

From an image, a depth map, a fluid mask and a handful of motion hints the
package builds a 3D surface mesh, runs an incompressible surface flow solver
on it, projects the motion back to the image plane, and synthesizes a
looping video by layered forward warping.  Solid objects can be dropped into
the stream and the flow re-solved around them.
"""

from .errors import (
    AllHoles,
    BadMagic,
    DegenerateTriangle,
    DimensionMismatch,
    EmptyFluidRegion,
    EmptySequence,
    MissingFile,
    NoHints,
    NonPositiveDepth,
    ObjectOutOfFrame,
    SingularLift,
    SingularSystem,
    SolverDiverged,
    StillflowError,
    TruncatedFile,
)
from .scene_io import (
    CameraIntrinsics,
    MotionField,
    SceneBundle,
    SparseHint,
    average_flow_window,
    load_scene,
    read_flo,
    write_flo,
)
from .mesh import (
    BarycentricLocation,
    SurfaceMesh,
    build_mesh,
    closest_point_on_mesh,
    export_obj,
    triangle_basis_solve,
    unproject,
)
from .motion import (
    DisplacementMap,
    densify_hints,
    integrate_euler,
    invert_displacement,
)
from .lift import (
    FaceVelocityField,
    lift_flow,
    project_velocity,
    rasterize_surface_motion,
)
from .sim import (
    ParticleSet,
    PressureField,
    SimConfig,
    SimState,
    advect,
    face_gradient,
    particles_to_faces,
    project_velocities,
    replenish,
    seed_particles,
    solve_pressure,
    step,
    vertex_divergence,
)
from .grid2d import Grid2DState, grid2d_step, project_motion_grid2d, state_from_motion
from .render import (
    FrameSequence,
    LayerStack,
    blend_symmetric,
    composite,
    hole_fill,
    render_sequence,
    splat_forward,
)
from .edit import (
    InsertedObject,
    OcclusionSplit,
    apply_edit,
    classify_occlusion,
    cut_mesh,
    load_obj,
    make_box,
    make_sphere,
    place_primitive,
)
from . import pipeline

__version__ = "0.1.0"

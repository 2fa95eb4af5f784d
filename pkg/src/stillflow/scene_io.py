"""Scene loading, validation and raster/flow file formats.

A scene lives in a directory with a JSON manifest pointing at its assets
by relative path:

    {
      "image": "image.png",
      "depth": "depth.pfm",            # or a 16-bit PNG + "depth_scale"
      "fluid_mask": "mask.png",
      "intrinsics": {"fx":..., "fy":..., "cx":..., "cy":...},   # optional
      "hints": [{"u":..., "v":..., "vx":..., "vy":...}],
      "fluid_layer": "...", "background_layer": "...",          # optional RGBA
      "z_map": "...", "gt_flow": "flow.flo"                     # optional
    }

All rasters are row-major with a top-left origin and y-down pixel
coordinates.  Depth is metric and must be strictly positive.  Motion is
measured in pixels per frame everywhere.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptySequence,
    MissingFile,
    NonPositiveDepth,
    TruncatedFile,
)

FLO_MAGIC = 202021.25

DEFAULT_FLOW_WINDOW = 30


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @staticmethod
    def default_for(height: int, width: int) -> "CameraIntrinsics":
        # 90 degree vertical field of view: fy = H/2, square pixels.
        fy = height / 2.0
        return CameraIntrinsics(fx=fy, fy=fy, cx=width / 2.0, cy=height / 2.0)


@dataclass(frozen=True)
class SparseHint:
    """A user-labelled velocity at one pixel, in pixels/frame."""

    u: float
    v: float
    vx: float
    vy: float

    @property
    def position(self):
        return (self.u, self.v)

    @property
    def velocity(self):
        return (self.vx, self.vy)


@dataclass
class MotionField:
    """Dense per-pixel 2-channel velocity (vx, vy) in pixels/frame."""

    data: np.ndarray            # (H, W, 2)
    valid_mask: np.ndarray      # (H, W) bool

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError("motion data must have shape (H, W, 2)")
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.data.shape[:2], dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != self.data.shape[:2]:
            raise ValueError("valid_mask shape must match motion data")
        if not np.all(np.isfinite(self.data[self.valid_mask])):
            raise ValueError("motion field has non-finite values on valid pixels")

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass
class SceneBundle:
    """Everything the pipeline consumes for one scene."""

    image: np.ndarray           # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray           # (H, W) float32, meters, > 0
    fluid_mask: np.ndarray      # (H, W) bool
    intrinsics: CameraIntrinsics
    hints: list[SparseHint] = field(default_factory=list)
    fluid_layer: np.ndarray | None = None        # (H, W, 4) float32
    background_layer: np.ndarray | None = None   # (H, W, 4) float32
    z_map: np.ndarray | None = None              # (H, W) float32 splat logits
    gt_flow: MotionField | None = None

    @property
    def shape(self):
        return self.image.shape[:2]

    def validate(self):
        h, w = self.shape
        for name, arr in (
            ("depth", self.depth),
            ("fluid_mask", self.fluid_mask),
            ("fluid_layer", self.fluid_layer),
            ("background_layer", self.background_layer),
            ("z_map", self.z_map),
        ):
            if arr is not None and arr.shape[:2] != (h, w):
                raise DimensionMismatch(
                    f"{name} is {arr.shape[1]}x{arr.shape[0]}, image is {w}x{h}",
                    asset=name,
                )
        if self.gt_flow is not None and self.gt_flow.shape != (h, w):
            raise DimensionMismatch("gt_flow does not match image size", asset="gt_flow")
        if np.any(self.depth <= 0):
            raise NonPositiveDepth("depth contains values <= 0", asset="depth")
        for hint in self.hints:
            if not (0 <= hint.u < w and 0 <= hint.v < h):
                raise ValueError(f"hint at ({hint.u}, {hint.v}) outside image bounds")
        return self


# ---------------------------------------------------------------------------
# Raster formats
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Read an 8/16-bit image to float32 in [0, 1], keeping channel count."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such file: {path}", asset=str(path))
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    return arr.astype(np.float32)


def write_image(arr: np.ndarray, path):
    """Write a float array in [0, 1] as an 8-bit PNG (round-to-nearest)."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    a = np.rint(a * 255.0).astype(np.uint8)
    Image.fromarray(a).save(path)


def read_pfm(path) -> np.ndarray:
    """Read a PFM (grayscale or color) file.  Scanlines are stored bottom-up."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such file: {path}", asset=str(path))
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise BadMagic(f"not a PFM file: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        endian = "<" if scale < 0 else ">"
        count = w * h * channels
        raw = f.read(count * 4)
        if len(raw) < count * 4:
            raise TruncatedFile(f"PFM data short: {path}")
        data = np.frombuffer(raw, dtype=endian + "f4", count=count)
    data = data.reshape(h, w, channels) if channels > 1 else data.reshape(h, w)
    return np.ascontiguousarray(data[::-1]).astype(np.float32)


def write_pfm(arr: np.ndarray, path):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM supports (H,W) or (H,W,3) arrays")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def read_flo(path) -> MotionField:
    """Read a Middlebury .flo flow file (float magic, int32 W/H, f32 pairs)."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such file: {path}", asset=str(path))
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) < 4:
            raise TruncatedFile(f"flo header short: {path}")
        (magic,) = struct.unpack("<f", head)
        if magic != FLO_MAGIC:
            raise BadMagic(f"bad .flo magic {magic!r} in {path}")
        dims = f.read(8)
        if len(dims) < 8:
            raise TruncatedFile(f"flo header short: {path}")
        w, h = struct.unpack("<ii", dims)
        if w <= 0 or h <= 0:
            raise TruncatedFile(f"flo reports nonsensical size {w}x{h}")
        raw = f.read(w * h * 2 * 4)
        if len(raw) < w * h * 2 * 4:
            raise TruncatedFile(f"flo data short: {path}")
        data = np.frombuffer(raw, dtype="<f4").reshape(h, w, 2).copy()
    return MotionField(data=data, valid_mask=np.ones((h, w), dtype=bool))


def write_flo(field: MotionField, path):
    data = np.ascontiguousarray(field.data, dtype="<f4")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(data.tobytes())


def flo_bytes(field: MotionField) -> bytes:
    """Serialize a motion field to .flo wire bytes (used by the service)."""
    data = np.ascontiguousarray(field.data, dtype="<f4")
    h, w = data.shape[:2]
    return struct.pack("<f", FLO_MAGIC) + struct.pack("<ii", w, h) + data.tobytes()


def average_flow_window(fields, window: int = DEFAULT_FLOW_WINDOW):
    """Temporal sliding mean over a flow sequence.

    output[i] averages the inputs in a window of `window` frames centered
    on i and clipped to the sequence bounds, so window=1 is the identity.
    """
    fields = list(fields)
    if not fields:
        raise EmptySequence("cannot average an empty flow sequence")
    if window < 1:
        raise ValueError("window must be >= 1")
    shape = fields[0].data.shape
    for f in fields:
        if f.data.shape != shape:
            raise DimensionMismatch("flow fields in sequence differ in shape")
    n = len(fields)
    stack = np.stack([f.data.astype(np.float64) for f in fields])
    # prefix sums make every window a two-lookup difference
    csum = np.concatenate([np.zeros((1,) + shape), np.cumsum(stack, axis=0)])
    half = window // 2
    out = []
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        mean = (csum[hi] - csum[lo]) / (hi - lo)
        out.append(MotionField(data=mean.astype(stack.dtype), valid_mask=fields[i].valid_mask.copy()))
    return out


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------

def _require(manifest: dict, key: str, manifest_path: Path):
    if key not in manifest:
        raise MissingFile(f"manifest {manifest_path} lacks required key '{key}'", asset=key)
    return manifest[key]


def load_scene(path) -> SceneBundle:
    """Load and validate a scene from a manifest file or scene directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    if not path.exists():
        raise MissingFile(f"no such manifest: {path}", asset=str(path))
    root = path.parent
    manifest = json.loads(path.read_text())

    image = read_image(root / _require(manifest, "image", path))
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    image = image[:, :, :3]
    h, w = image.shape[:2]

    depth_name = _require(manifest, "depth", path)
    depth_path = root / depth_name
    if str(depth_name).lower().endswith(".pfm"):
        depth = read_pfm(depth_path)
    else:
        depth = read_image(depth_path)
        if depth.ndim == 3:
            depth = depth[:, :, 0]
        depth = depth * float(manifest.get("depth_scale", 1.0))
    depth = depth.astype(np.float32)

    mask = read_image(root / _require(manifest, "fluid_mask", path))
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    fluid_mask = mask > 0.5

    if "intrinsics" in manifest:
        k = manifest["intrinsics"]
        intrinsics = CameraIntrinsics(fx=k["fx"], fy=k["fy"], cx=k["cx"], cy=k["cy"])
    else:
        intrinsics = CameraIntrinsics.default_for(h, w)

    hints = [
        SparseHint(u=float(s["u"]), v=float(s["v"]), vx=float(s["vx"]), vy=float(s["vy"]))
        for s in manifest.get("hints", [])
    ]

    def optional_rgba(key):
        if key not in manifest:
            return None
        arr = read_image(root / manifest[key])
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        if arr.shape[2] == 3:
            arr = np.concatenate([arr, np.ones_like(arr[:, :, :1])], axis=2)
        return arr

    if "z_map" in manifest:
        zname = str(manifest["z_map"])
        z_map = read_pfm(root / zname) if zname.lower().endswith(".pfm") else read_image(root / zname)
        if z_map.ndim == 3:
            z_map = z_map[:, :, 0]
    else:
        # no splat-confidence map supplied: neutral (uniform) weights
        z_map = np.zeros((h, w), dtype=np.float32)

    gt_flow = read_flo(root / manifest["gt_flow"]) if "gt_flow" in manifest else None

    bundle = SceneBundle(
        image=image.astype(np.float32),
        depth=depth,
        fluid_mask=fluid_mask,
        intrinsics=intrinsics,
        hints=hints,
        fluid_layer=optional_rgba("fluid_layer"),
        background_layer=optional_rgba("background_layer"),
        z_map=z_map.astype(np.float32),
        gt_flow=gt_flow,
    )
    return bundle.validate()

"""Dataset and grid I/O plus procedural synthetic exemplar scenes.

Pose manifests are a single JSON file next to 8-bit PNG frames; feature grids
use the binary "RFG1" format.  Synthetic scenes (boxes/spheres on black) give
the rest of the pipeline a ground truth to be tested against.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .relu_field import N_CHANNELS, FeatureGrid

ROTATION_TOL = 1e-6


class ManifestError(ValueError):
    """Malformed dataset manifest or frame."""


@dataclass
class Camera:
    """Pinhole camera: world-to-camera rotation/translation plus intrinsics.

    Convention: x_cam = rotation @ x_world + translation; camera looks along
    +z in camera space, image y runs downward.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal_point: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        self.focal = float(self.focal)
        self.width = int(self.width)
        self.height = int(self.height)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"rotation is not orthonormal (|R^T R - I| = {err:.3g})")
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        cx, cy = self.principal_point
        if not (0.0 <= cx <= self.width and 0.0 <= cy <= self.height):
            raise ValueError(f"principal point {(cx, cy)} outside image bounds")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """World-space optical axis (+z of camera space)."""
        return self.rotation[2].copy()


@dataclass
class PosedImageSet:
    """Images with one camera each; linear RGB in [0, 1], shared (H, W)."""

    images: list
    cameras: list

    def __post_init__(self):
        self.images = [np.asarray(im, dtype=np.float64) for im in self.images]
        if len(self.images) == 0:
            raise ValueError("dataset must contain at least one image")
        if len(self.images) != len(self.cameras):
            raise ValueError(f"{len(self.images)} images but {len(self.cameras)} cameras")
        shape = self.images[0].shape
        for i, im in enumerate(self.images):
            if im.ndim != 3 or im.shape[2] != 3:
                raise ValueError(f"image {i} is not HxWx3")
            if im.shape != shape:
                raise ValueError(f"image {i} shape {im.shape} differs from {shape}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple:
        return self.images[0].shape[:2]


@dataclass
class Primitive:
    kind: str  # "box" | "sphere"
    center: np.ndarray
    extent: np.ndarray  # half-extent per axis (all equal to radius for spheres)
    color: np.ndarray

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        if self.kind == "box":
            return np.all(np.abs(pts - self.center) <= self.extent, axis=-1)
        if self.kind == "sphere":
            return np.sum((pts - self.center) ** 2, axis=-1) <= self.extent[0] ** 2
        raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass
class SyntheticScene:
    ground_truth_grid: FeatureGrid
    primitives: list
    rng_seed: int


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def as_image_array(image) -> np.ndarray:
    """Accept torch tensors or arrays; return an (H, W, 3) float64 ndarray."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    return np.asarray(image, dtype=np.float64)


# ---------------------------------------------------------------------------
# Pose manifest + PNG frames
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {"width", "height", "color_space", "frames"}
_FRAME_KEYS = {"file", "focal_px", "cx", "cy", "rotation", "translation"}


def save_dataset(dataset: PosedImageSet, out_dir) -> Path:
    """Write 8-bit PNG frames and a JSON manifest; returns the manifest path.

    Cameras round-trip exactly (floats serialized at full precision); pixels
    round-trip within 8-bit quantization.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (im, cam) in enumerate(zip(dataset.images, dataset.cameras)):
        rel = f"images/frame_{i:04d}.png"
        quantized = np.clip(np.round(np.clip(im, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(quantized).save(out_dir / rel)
        frames.append({
            "file": rel,
            "focal_px": cam.focal,
            "cx": float(cam.principal_point[0]),
            "cy": float(cam.principal_point[1]),
            "rotation": cam.rotation.tolist(),
            "translation": cam.translation.tolist(),
        })
    h, w = dataset.image_shape
    manifest = {"width": int(w), "height": int(h), "color_space": "linear", "frames": frames}
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest_path


def load_dataset(manifest_path) -> PosedImageSet:
    """Load and validate a pose manifest plus its frames."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)

    unknown = set(manifest) - _MANIFEST_KEYS
    if unknown or set(manifest) != _MANIFEST_KEYS:
        missing = _MANIFEST_KEYS - set(manifest)
        raise ManifestError(f"manifest keys: unknown={sorted(unknown)} missing={sorted(missing)}")
    if manifest["color_space"] not in ("linear", "srgb"):
        raise ManifestError(f"color_space must be 'linear' or 'srgb', got {manifest['color_space']!r}")
    if not manifest["frames"]:
        raise ManifestError("manifest has no frames")

    width, height = int(manifest["width"]), int(manifest["height"])
    images, cameras = [], []
    for i, frame in enumerate(manifest["frames"]):
        if set(frame) != _FRAME_KEYS:
            raise ManifestError(f"frame {i}: keys {sorted(frame)} do not match schema")
        path = manifest_path.parent / frame["file"]
        if not path.is_file():
            raise ManifestError(f"frame {i}: image file missing: {frame['file']}")
        im = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
        if im.shape[:2] != (height, width):
            raise ManifestError(f"frame {i}: image is {im.shape[1]}x{im.shape[0]}, "
                                f"manifest says {width}x{height}")
        if manifest["color_space"] == "srgb":
            im = srgb_to_linear(im)
        try:
            cam = Camera(rotation=frame["rotation"], translation=frame["translation"],
                         focal=frame["focal_px"], principal_point=(frame["cx"], frame["cy"]),
                         width=width, height=height)
        except ValueError as e:
            raise ManifestError(f"frame {i} ({frame['file']}): {e}") from e
        images.append(im)
        cameras.append(cam)
    return PosedImageSet(images=images, cameras=cameras)


# ---------------------------------------------------------------------------
# RFG1 binary grid format
# ---------------------------------------------------------------------------

_RFG1_MAGIC = b"RFG1"


def write_grid(grid: FeatureGrid, path) -> Path:
    """Write the RFG1 binary format.

    Layout: magic 'RFG1'; uint32 LE nx, ny, nz, channels; 6 float32 LE AABB
    (min xyz, max xyz); nx*ny*nz*channels float32 LE samples ordered
    x-fastest (then y, then z, channels slowest).
    """
    path = Path(path)
    nx, ny, nz = grid.resolution
    data = grid.data.detach().cpu().numpy().astype("<f4")
    payload = np.ascontiguousarray(data.transpose(3, 2, 1, 0))  # (c, z, y, x): x fastest
    with open(path, "wb") as f:
        f.write(_RFG1_MAGIC)
        f.write(struct.pack("<4I", nx, ny, nz, N_CHANNELS))
        f.write(np.concatenate([grid.aabb_min, grid.aabb_max]).astype("<f4").tobytes())
        f.write(payload.tobytes())
    return path


def read_grid(path, dtype=torch.float64) -> FeatureGrid:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _RFG1_MAGIC:
            raise ValueError(f"{path}: not an RFG1 file (magic {magic!r})")
        nx, ny, nz, channels = struct.unpack("<4I", f.read(16))
        if channels != N_CHANNELS:
            raise ValueError(f"{path}: {channels} channels, expected {N_CHANNELS}")
        aabb = np.frombuffer(f.read(24), dtype="<f4").astype(np.float64)
        raw = np.frombuffer(f.read(nx * ny * nz * channels * 4), dtype="<f4")
        if raw.size != nx * ny * nz * channels:
            raise ValueError(f"{path}: truncated payload")
    data = raw.reshape(channels, nz, ny, nx).transpose(3, 2, 1, 0)
    return FeatureGrid(torch.as_tensor(np.ascontiguousarray(data)).to(dtype), aabb[:3], aabb[3:])


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.80, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.80, 0.80],
    [0.95, 0.55, 0.10],
    [0.90, 0.90, 0.90],
])

_EXTENT_RANGE = (0.08, 0.30)
AABB_MIN = np.array([-1.0, -1.0, -1.0])
AABB_MAX = np.array([1.0, 1.0, 1.0])


def _sample_primitive(kind: str, rng: np.random.Generator) -> Primitive:
    if kind == "box":
        extent = rng.uniform(*_EXTENT_RANGE, size=3)
    else:
        extent = np.full(3, rng.uniform(*_EXTENT_RANGE))
    color = PALETTE[rng.integers(0, len(PALETTE))]
    # rejection sampling: uniform center over the AABB, redrawn until the
    # primitive lies fully inside
    while True:
        center = rng.uniform(AABB_MIN, AABB_MAX)
        if np.all(center - extent >= AABB_MIN) and np.all(center + extent <= AABB_MAX):
            return Primitive(kind=kind, center=center, extent=extent, color=color.copy())


def make_synthetic_scene(kind: str, count: int, resolution: int, rng_seed: int) -> SyntheticScene:
    """Procedural self-similar exemplar: random boxes/spheres on black.

    Raw density is +1 inside primitives and -1 outside (so the activated
    density is exactly 1/0); colors come from a fixed palette, later
    primitives overwrite earlier ones.  Pure function of rng_seed.
    """
    if kind not in ("boxes", "spheres", "mixed"):
        raise ValueError(f"kind must be boxes|spheres|mixed, got {kind!r}")
    if not (16 <= resolution <= 256):
        raise ValueError(f"resolution must be in [16, 256], got {resolution}")
    if count < 1:
        raise ValueError("count must be >= 1")

    rng = np.random.default_rng(rng_seed)
    primitives = []
    for i in range(count):
        if kind == "boxes":
            k = "box"
        elif kind == "spheres":
            k = "sphere"
        else:
            k = "box" if rng.integers(0, 2) == 0 else "sphere"
        primitives.append(_sample_primitive(k, rng))

    res = (resolution, resolution, resolution)
    axes = [np.linspace(AABB_MIN[a], AABB_MAX[a], resolution) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    data = np.empty((resolution ** 3, N_CHANNELS), dtype=np.float64)
    data[:, 0] = -1.0
    data[:, 1:] = 0.0
    for prim in primitives:
        mask = prim.contains(nodes)
        data[mask, 0] = 1.0
        data[mask, 1:] = prim.color
    grid = FeatureGrid(torch.from_numpy(data.reshape(*res, N_CHANNELS)), AABB_MIN, AABB_MAX)
    return SyntheticScene(ground_truth_grid=grid, primitives=primitives, rng_seed=rng_seed)


def render_dataset(scene: SyntheticScene, n_views: int, image_size: int, rng_seed: int) -> PosedImageSet:
    """Render the ground-truth grid from hemisphere cameras looking at the center."""
    from . import renderer  # deferred: renderer depends on this module for Camera

    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    grid = scene.ground_truth_grid
    model = renderer.PoseModel.for_grid(grid, image_size=image_size, focal=float(image_size))
    cfg = renderer.RenderConfig(rng_policy="deterministic_midpoint")
    rng = np.random.default_rng(rng_seed)
    images, cameras = [], []
    for _ in range(n_views):
        cam = renderer.sample_pose(model, stage=len(model.focal_schedule) - 1, rng=rng)
        images.append(as_image_array(renderer.render_image(grid, cam, cfg)))
        cameras.append(cam)
    return PosedImageSet(images=images, cameras=cameras)

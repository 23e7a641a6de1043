"""Differentiable emission-absorption raymarching of a FeatureGrid.

Compositing follows the classic over operator: alpha_k = 1 - exp(-sigma_k *
density_scale * delta_k), transmittance is the exclusive running product of
(1 - alpha), and the leftover transmittance picks up the background.  The
weights telescope, so sum(T_k * alpha_k) + T_final == 1; several tests lean
on that identity.

Jitter is counter-based (seeding.jitter_uniform keyed by pixel index), so a
rendered patch equals the matching crop of the full image under every
sampling policy, not just the deterministic one.  pixel_index = v * width + u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .relu_field import FeatureGrid, activate, trilerp
from .scene_io import Camera
from .seeding import jitter_uniform

DIRECTION_TOL = 1e-6
_POLE_TOL = 1e-4
_CHUNK = 4096

RNG_POLICIES = ("stratified", "uniform_jitter", "deterministic_midpoint")


@dataclass
class Ray:
    """World-space ray with its parametric overlap against the grid AABB.

    t_near == t_far marks a degenerate ray (no AABB intersection); it renders
    pure background and contributes no gradient.
    """

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.t_near = float(self.t_near)
        self.t_far = float(self.t_far)
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > DIRECTION_TOL:
            raise ValueError(f"direction must be unit length, |d| = {norm:.9f}")
        if self.t_near > self.t_far:
            raise ValueError(f"t_near {self.t_near} > t_far {self.t_far}")

    @property
    def degenerate(self) -> bool:
        return self.t_near == self.t_far


@dataclass
class RenderConfig:
    samples_per_ray: int = 256
    density_scale: float | None = None  # None resolves to 25 / AABB diagonal
    background_rgb: tuple = (0.0, 0.0, 0.0)
    rng_policy: str = "deterministic_midpoint"
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if self.density_scale is not None and not self.density_scale > 0:
            raise ValueError("density_scale must be positive")
        if self.rng_policy not in RNG_POLICIES:
            raise ValueError(f"rng_policy must be one of {RNG_POLICIES}")
        bg = np.asarray(self.background_rgb, dtype=np.float64).reshape(3)
        if bg.min() < 0 or bg.max() > 1:
            raise ValueError("background_rgb components must lie in [0, 1]")
        self.background_rgb = tuple(float(c) for c in bg)

    def resolve_scale(self, grid: FeatureGrid) -> float:
        if self.density_scale is not None:
            return float(self.density_scale)
        return 25.0 / float(np.linalg.norm(grid.aabb_max - grid.aabb_min))


@dataclass
class PoseModel:
    """Camera distribution: hemisphere positions looking at the scene center.

    The focal schedule is per training stage; its last entry must equal the
    exemplar camera focal, so renders at the final stage match the dataset
    intrinsics.
    """

    center: np.ndarray
    radius: float
    elevation_range: tuple
    focal_schedule: list
    width: int
    height: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.radius = float(self.radius)
        lo, hi = (float(e) for e in self.elevation_range)
        self.elevation_range = (lo, hi)
        self.focal_schedule = [float(f) for f in self.focal_schedule]
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not (-math.pi / 2 <= lo <= hi <= math.pi / 2):
            raise ValueError(f"bad elevation range {self.elevation_range}")
        if not self.focal_schedule or min(self.focal_schedule) <= 0:
            raise ValueError("focal_schedule must be non-empty and positive")

    @classmethod
    def for_grid(cls, grid: FeatureGrid, image_size: int, focal: float,
                 n_stages: int = 1, start_focal: float | None = None,
                 radius_factor: float = 2.5,
                 elevation_deg: tuple = (15.0, 75.0)) -> "PoseModel":
        """Hemisphere above the grid: radius = radius_factor x half-diagonal;
        focal ramps linearly from start_focal (default 0.5x, wider early
        views) up to the exemplar focal across stages."""
        center = 0.5 * (grid.aabb_min + grid.aabb_max)
        radius = radius_factor * 0.5 * float(np.linalg.norm(grid.aabb_max - grid.aabb_min))
        if n_stages == 1:
            schedule = [float(focal)]
        else:
            start = 0.5 * focal if start_focal is None else start_focal
            schedule = np.linspace(start, focal, n_stages).tolist()
        lo, hi = (math.radians(d) for d in elevation_deg)
        return cls(center=center, radius=radius, elevation_range=(lo, hi),
                   focal_schedule=schedule, width=image_size, height=image_size)


# ---------------------------------------------------------------------------
# Ray generation
# ---------------------------------------------------------------------------

def _slab_intersect(origins: np.ndarray, directions: np.ndarray,
                    aabb_min: np.ndarray, aabb_max: np.ndarray):
    """Vectorized ray/AABB overlap; returns (t_near, t_far) with misses
    encoded as t_near == t_far == 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (aabb_min - origins) * inv
        t1 = (aabb_max - origins) * inv
    # 0 * inf from an origin sitting exactly on a slab plane: no constraint
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    near = np.minimum(t0, t1).max(axis=-1)
    far = np.maximum(t0, t1).min(axis=-1)
    near = np.maximum(near, 0.0)
    miss = far <= near
    near = np.where(miss, 0.0, near)
    far = np.where(miss, 0.0, far)
    return near, far


def _pixel_directions(camera: Camera, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    cx, cy = camera.principal_point
    d_cam = np.stack([(us + 0.5 - cx) / camera.focal,
                      (vs + 0.5 - cy) / camera.focal,
                      np.ones_like(us, dtype=np.float64)], axis=-1)
    d_world = d_cam @ camera.rotation  # == (R^T @ d_cam^T)^T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def _pixel_rays(camera: Camera, us, vs, aabb_min, aabb_max):
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    dirs = _pixel_directions(camera, us, vs)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    near, far = _slab_intersect(origins, dirs, np.asarray(aabb_min, dtype=np.float64),
                                np.asarray(aabb_max, dtype=np.float64))
    return origins, dirs, near, far


def generate_rays(camera: Camera, pixel_coords, aabb_min=(-1.0, -1.0, -1.0),
                  aabb_max=(1.0, 1.0, 1.0)) -> list:
    """Pinhole rays for (u, v) pixel coords, t-clipped to the given AABB."""
    coords = np.asarray(pixel_coords, dtype=np.float64).reshape(-1, 2)
    if coords.size and (coords[:, 0].min() < 0 or coords[:, 0].max() >= camera.width
                        or coords[:, 1].min() < 0 or coords[:, 1].max() >= camera.height):
        raise ValueError("pixel coords outside image bounds")
    origins, dirs, near, far = _pixel_rays(camera, coords[:, 0], coords[:, 1],
                                           aabb_min, aabb_max)
    return [Ray(o, d, n, f) for o, d, n, f in zip(origins, dirs, near, far)]


# ---------------------------------------------------------------------------
# Marching
# ---------------------------------------------------------------------------

def _sample_offsets(cfg: RenderConfig, pixel_indices: np.ndarray) -> np.ndarray:
    """Fractional sample positions in [0, 1) per ray, shape (N, S)."""
    s = cfg.samples_per_ray
    base = np.arange(s, dtype=np.float64)
    if cfg.rng_policy == "deterministic_midpoint":
        off = np.broadcast_to(base + 0.5, (len(pixel_indices), s))
    elif cfg.rng_policy == "stratified":
        off = base + jitter_uniform(cfg.seed, pixel_indices, s)
    else:  # uniform_jitter: one shared offset per ray
        off = base + jitter_uniform(cfg.seed, pixel_indices, 1)
    return off / s


def _march(grid: FeatureGrid, origins, dirs, near, far, cfg: RenderConfig,
           pixel_indices: np.ndarray, return_aux: bool = False):
    """Torch compositing core; keeps the autograd graph of grid.data."""
    dtype = grid.data.dtype
    n = origins.shape[0]
    seg = far - near  # (N,)
    offsets = _sample_offsets(cfg, pixel_indices)  # (N, S)
    t = near[:, None] + offsets * seg[:, None]
    points = origins[:, None, :] + t[..., None] * dirs[:, None, :]

    feat = activate(trilerp(grid, torch.as_tensor(points, dtype=dtype).reshape(-1, 3)))
    feat = feat.reshape(n, cfg.samples_per_ray, 4)
    sigma, colors = feat[..., 0], feat[..., 1:]

    delta = torch.as_tensor(seg / cfg.samples_per_ray, dtype=dtype)
    alpha = 1.0 - torch.exp(-sigma * (cfg.resolve_scale(grid) * delta[:, None]))
    trans = torch.cumprod(
        torch.cat([torch.ones(n, 1, dtype=dtype), 1.0 - alpha], dim=1), dim=1)
    weights = trans[:, :-1] * alpha
    t_final = trans[:, -1]
    bg = torch.as_tensor(cfg.background_rgb, dtype=dtype)
    rgb = (weights.unsqueeze(-1) * colors).sum(dim=1) + t_final.unsqueeze(-1) * bg
    if return_aux:
        return rgb, {"weights": weights, "t_final": t_final}
    return rgb


def _rays_to_arrays(rays) -> tuple:
    origins = np.stack([r.origin for r in rays])
    dirs = np.stack([r.direction for r in rays])
    near = np.array([r.t_near for r in rays])
    far = np.array([r.t_far for r in rays])
    return origins, dirs, near, far


def march_rays(grid: FeatureGrid, rays, cfg: RenderConfig, pixel_indices=None,
               return_aux: bool = False):
    """Composite a batch of rays; returns (N, 3) float64 colors.

    With return_aux=True additionally returns {"weights": (N, S),
    "t_final": (N,)} for compositing-identity checks.
    """
    if len(rays) == 0:
        raise ValueError("empty ray batch")
    if pixel_indices is None:
        pixel_indices = np.arange(len(rays), dtype=np.uint64)
    with torch.no_grad():
        out = _march(grid, *_rays_to_arrays(rays), cfg,
                     np.asarray(pixel_indices, dtype=np.uint64), return_aux=return_aux)
    if return_aux:
        rgb, aux = out
        return (rgb.double().numpy(),
                {k: v.double().numpy() for k, v in aux.items()})
    return out.double().numpy()


def march_ray(grid: FeatureGrid, ray: Ray, cfg: RenderConfig, pixel_index: int = 0) -> np.ndarray:
    """Single-ray convenience wrapper; degenerate rays return the background."""
    return march_rays(grid, [ray], cfg, pixel_indices=[pixel_index])[0]


def render_image(grid: FeatureGrid, camera: Camera, cfg: RenderConfig) -> torch.Tensor:
    """Full (H, W, 3) render; differentiable w.r.t. grid.data."""
    w, h = camera.width, camera.height
    vs, us = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    us, vs = us.reshape(-1), vs.reshape(-1)
    origins, dirs, near, far = _pixel_rays(camera, us, vs, grid.aabb_min, grid.aabb_max)
    pix = (vs * w + us).astype(np.uint64)
    chunks = []
    for i in range(0, len(us), _CHUNK):
        sl = slice(i, i + _CHUNK)
        chunks.append(_march(grid, origins[sl], dirs[sl], near[sl], far[sl], cfg, pix[sl]))
    return torch.cat(chunks, dim=0).reshape(h, w, 3)


def render_patch_2d(grid: FeatureGrid, camera: Camera, cfg: RenderConfig,
                    corner, size) -> torch.Tensor:
    """Render only the rays of a (w, h) patch with top-left pixel `corner`.

    Matches the same crop of render_image exactly because per-ray rng is keyed
    by full-image pixel index.
    """
    u0, v0 = (int(c) for c in corner)
    pw, ph = (int(s) for s in size)
    if pw < 1 or ph < 1:
        raise ValueError("patch size must be positive")
    if u0 < 0 or v0 < 0 or u0 + pw > camera.width or v0 + ph > camera.height:
        raise ValueError(f"patch corner={corner} size={size} exceeds "
                         f"{camera.width}x{camera.height} image")
    vs, us = np.meshgrid(np.arange(v0, v0 + ph), np.arange(u0, u0 + pw), indexing="ij")
    us, vs = us.reshape(-1), vs.reshape(-1)
    origins, dirs, near, far = _pixel_rays(camera, us, vs, grid.aabb_min, grid.aabb_max)
    pix = (vs * camera.width + us).astype(np.uint64)
    return _march(grid, origins, dirs, near, far, cfg, pix).reshape(ph, pw, 3)


def grad_march(grid: FeatureGrid, rays, cfg: RenderConfig, target_rgbs,
               pixel_indices=None) -> np.ndarray:
    """Gradient of the mean squared error over the given rays w.r.t. raw grid
    values (loss = mean over N*3 entries of (rgb - target)^2).

    Backpropagates through compositing, the clamp activation (subgradient 0
    outside (0, 1)), and the trilinear weights.
    """
    if pixel_indices is None:
        pixel_indices = np.arange(len(rays), dtype=np.uint64)
    data = grid.data.detach().clone().requires_grad_(True)
    live = FeatureGrid(data, grid.aabb_min, grid.aabb_max)
    rgb = _march(live, *_rays_to_arrays(rays), cfg,
                 np.asarray(pixel_indices, dtype=np.uint64))
    target = torch.as_tensor(np.asarray(target_rgbs, dtype=np.float64),
                             dtype=data.dtype).reshape(rgb.shape)
    loss = ((rgb - target) ** 2).mean()
    (g,) = torch.autograd.grad(loss, data, allow_unused=True)
    if g is None:  # every ray degenerate: loss constant in the grid
        return np.zeros(tuple(grid.data.shape))
    return g.double().numpy()


# ---------------------------------------------------------------------------
# Pose sampling
# ---------------------------------------------------------------------------

def look_at(eye, target, focal: float, width: int, height: int) -> Camera:
    """Camera at `eye` looking at `target`, world-up +z (x-axis fallback at
    the poles), principal point at the image center."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    dist = np.linalg.norm(fwd)
    if dist == 0:
        raise ValueError("eye and target coincide")
    fwd = fwd / dist
    up = np.array([0.0, 0.0, 1.0])
    if abs(abs(fwd @ up) - 1.0) < _POLE_TOL:
        up = np.array([1.0, 0.0, 0.0])
    x_c = np.cross(fwd, up)
    x_c /= np.linalg.norm(x_c)
    y_c = np.cross(fwd, x_c)  # points "down" in world terms: y_c . up <= 0
    rotation = np.stack([x_c, y_c, fwd])
    return Camera(rotation=rotation, translation=-rotation @ eye, focal=focal,
                  principal_point=(width / 2.0, height / 2.0), width=width, height=height)


def sample_pose(model: PoseModel, stage: int, rng: np.random.Generator) -> Camera:
    """Draw a camera from the hemisphere: azimuth uniform, elevation uniform
    in range, focal from the stage schedule."""
    if not (0 <= stage < len(model.focal_schedule)):
        raise ValueError(f"stage {stage} outside schedule of length {len(model.focal_schedule)}")
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = model.elevation_range
    elevation = rng.uniform(lo, hi)
    direction = np.array([math.cos(elevation) * math.cos(azimuth),
                          math.cos(elevation) * math.sin(azimuth),
                          math.sin(elevation)])
    eye = model.center + model.radius * direction
    return look_at(eye, model.center, model.focal_schedule[stage],
                   model.width, model.height)

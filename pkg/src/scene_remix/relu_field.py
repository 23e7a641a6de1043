"""Voxel feature grid with interpolate-then-activate evaluation.

The grid stores raw features (channel 0 = density, 1-3 = RGB) nominally in
[-1, 1].  A continuous field is obtained by trilinear interpolation of the
raw values followed by a clamped ReLU into [0, 1]; applying the activation
after interpolation is what keeps boundaries crisp, so the order is part of
the contract and is tested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

N_CHANNELS = 4

# raw features returned for queries outside the AABB: zero density after
# the clamp, black color
OUT_OF_BOUNDS_RAW = (-1.0, 0.0, 0.0, 0.0)


@dataclass
class FeatureGrid:
    """Axis-aligned voxel grid of raw features.

    data: (nx, ny, nz, 4) float tensor; nodes sit at cell corners, node 0 at
    aabb_min and node n-1 at aabb_max (inclusive span).
    """

    data: torch.Tensor
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    def __post_init__(self):
        self.data = torch.as_tensor(self.data)
        if self.data.dim() != 4 or self.data.shape[-1] != N_CHANNELS:
            raise ValueError(f"grid data must be (nx, ny, nz, {N_CHANNELS}), got {tuple(self.data.shape)}")
        if min(self.data.shape[:3]) < 2:
            raise ValueError("trilinear interpolation needs at least 2 nodes per axis")
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64).reshape(3)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64).reshape(3)
        if not np.all(self.aabb_min < self.aabb_max):
            raise ValueError("aabb_min must be < aabb_max componentwise")
        if not bool(torch.isfinite(self.data.detach()).all()):
            raise ValueError("grid data contains NaN/Inf")

    @property
    def resolution(self) -> tuple:
        return tuple(int(s) for s in self.data.shape[:3])

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.aabb_max - self.aabb_min))

    @classmethod
    def filled(cls, resolution, fill, aabb_min=(-1.0, -1.0, -1.0), aabb_max=(1.0, 1.0, 1.0),
               dtype=torch.float64) -> "FeatureGrid":
        """Uniform grid; `resolution` is an int (cube) or a 3-tuple, `fill` a 4-vector."""
        if isinstance(resolution, int):
            resolution = (resolution, resolution, resolution)
        data = torch.empty(*resolution, N_CHANNELS, dtype=dtype)
        data[:] = torch.as_tensor(fill, dtype=dtype)
        return cls(data, np.asarray(aabb_min), np.asarray(aabb_max))

    def clone(self) -> "FeatureGrid":
        return FeatureGrid(self.data.detach().clone(), self.aabb_min.copy(), self.aabb_max.copy())


@dataclass
class FieldSample:
    """Activated field value at a point: density and rgb all in [0, 1]."""

    density: float
    rgb: np.ndarray = field(default_factory=lambda: np.zeros(3))


def trilerp(grid: FeatureGrid, points) -> torch.Tensor:
    """Trilinearly interpolated raw features at world-space points.

    `points` is (..., 3); returns (..., 4).  Points outside the AABB get
    OUT_OF_BOUNDS_RAW.  Differentiable w.r.t. grid.data.
    """
    data = grid.data
    pts = torch.as_tensor(points, dtype=data.dtype)
    single = pts.dim() == 1
    pts = pts.reshape(-1, 3)

    lo = torch.as_tensor(grid.aabb_min, dtype=data.dtype)
    hi = torch.as_tensor(grid.aabb_max, dtype=data.dtype)
    nx, ny, nz = grid.resolution
    n = torch.tensor([nx, ny, nz], dtype=data.dtype)

    inside = ((pts >= lo) & (pts <= hi)).all(dim=-1)

    u = (pts - lo) / (hi - lo) * (n - 1)
    i0 = torch.clamp(u.floor().long(), max=(n - 2).long())
    i0 = torch.clamp(i0, min=0)
    frac = (u - i0.to(data.dtype)).clamp(0.0, 1.0)

    flat = data.reshape(-1, N_CHANNELS)
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    out = torch.zeros(pts.shape[0], N_CHANNELS, dtype=data.dtype)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                idx = base + (dx * ny + dy) * nz + dz
                out = out + (wx * wy * wz).unsqueeze(-1) * flat[idx]

    oob = torch.tensor(OUT_OF_BOUNDS_RAW, dtype=data.dtype).expand_as(out)
    out = torch.where(inside.unsqueeze(-1), out, oob)
    return out[0] if single else out


def activate(raw: torch.Tensor) -> torch.Tensor:
    """Clamped ReLU min(max(x, 0), 1), applied channel-wise."""
    return torch.clamp(raw, 0.0, 1.0)


def field_eval(grid: FeatureGrid, point) -> FieldSample:
    """Activated field at one point: clamp(trilerp(grid, point), 0, 1)."""
    act = activate(trilerp(grid, point))
    return FieldSample(density=float(act[0]), rgb=act[1:4].detach().cpu().numpy())


def field_eval_many(grid: FeatureGrid, points) -> torch.Tensor:
    """Batched activated field values, (..., 4): density channel 0, rgb 1-3."""
    return activate(trilerp(grid, points))


def node_positions(resolution, aabb_min, aabb_max, dtype=torch.float64) -> torch.Tensor:
    """World positions of all grid nodes, shape (nx, ny, nz, 3)."""
    lo = np.asarray(aabb_min, dtype=np.float64)
    hi = np.asarray(aabb_max, dtype=np.float64)
    axes = [torch.linspace(lo[a], hi[a], int(resolution[a]), dtype=dtype) for a in range(3)]
    gx, gy, gz = torch.meshgrid(*axes, indexing="ij")
    return torch.stack([gx, gy, gz], dim=-1)


def upsample2x(grid: FeatureGrid) -> FeatureGrid:
    """Double the node count per axis; same AABB.

    New node values are the trilinear interpolation of the input raw field at
    the new node positions, so the represented field is preserved exactly
    wherever it is trilinear across each new cell (constants, globally linear
    fields, single-cell grids).
    """
    nx, ny, nz = grid.resolution
    new_res = (2 * nx, 2 * ny, 2 * nz)
    pts = node_positions(new_res, grid.aabb_min, grid.aabb_max, dtype=grid.data.dtype)
    vals = trilerp(grid, pts.reshape(-1, 3)).reshape(*new_res, N_CHANNELS)
    return FeatureGrid(vals, grid.aabb_min.copy(), grid.aabb_max.copy())


def extract_patch_3d(grid: FeatureGrid, corner, size) -> torch.Tensor:
    """Contiguous raw sub-block (size_x, size_y, size_z, 4); an independent copy."""
    corner = tuple(int(c) for c in corner)
    size = tuple(int(s) for s in size)
    dims = grid.resolution
    if any(s <= 0 for s in size):
        raise ValueError(f"patch size must be positive, got {size}")
    if any(c < 0 or c + s > d for c, s, d in zip(corner, size, dims)):
        raise ValueError(f"patch corner={corner} size={size} out of bounds for grid dims {dims}")
    x, y, z = corner
    sx, sy, sz = size
    return grid.data[x:x + sx, y:y + sy, z:z + sz, :].clone()


def random_patch_3d(grid: FeatureGrid, size, rng: np.random.Generator) -> torch.Tensor:
    """Patch at a corner drawn uniformly over all valid positions."""
    size = tuple(int(s) for s in ((size,) * 3 if isinstance(size, int) else size))
    dims = grid.resolution
    if any(s <= 0 for s in size):
        raise ValueError(f"patch size must be positive, got {size}")
    if any(s > d for s, d in zip(size, dims)):
        raise ValueError(f"patch size {size} exceeds grid dims {dims}")
    corner = tuple(int(rng.integers(0, d - s + 1)) for s, d in zip(size, dims))
    return extract_patch_3d(grid, corner, size)


def downsample2x_mean(data: torch.Tensor) -> torch.Tensor:
    """2x average pooling of raw features, (nx, ny, nz, c) -> halved dims."""
    t = data.permute(3, 0, 1, 2).unsqueeze(0)
    t = torch.nn.functional.avg_pool3d(t, kernel_size=2, stride=2)
    return t.squeeze(0).permute(1, 2, 3, 0)

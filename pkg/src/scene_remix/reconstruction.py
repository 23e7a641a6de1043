"""Coarse-to-fine photometric fitting of a FeatureGrid to posed images.

Optimization starts at final_resolution / start_divisor, runs a fixed number
of random-ray batches per level, doubles the grid, and repeats until the
final resolution.  Raw density starts at a small positive value: empty-leaning
but strictly inside the clamp's active region, so gradients flow from the
first batch.  A non-positive density init is a true saddle against a black
background (every color weight is zero and the clamp subgradient kills the
density path), so nothing would ever move.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .relu_field import FeatureGrid, upsample2x
from .renderer import RenderConfig, _march, _pixel_rays
from .scene_io import PosedImageSet, as_image_array

INIT_RAW = (0.1, 0.0, 0.0, 0.0)
PSNR_CAP_DB = 99.0


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss."""


@dataclass
class ReconConfig:
    final_resolution: tuple = (64, 64, 64)
    start_divisor: int = 16
    rays_per_batch: int = 2048
    batches_per_level: int = 20000
    learning_rate: float = 0.03
    optimizer: str = "adam"
    adam_betas: tuple = (0.9, 0.999)
    lr_decay: float = 0.5
    # rendering plumbing (the schedule above is the contract; these are knobs)
    samples_per_ray: int = 128
    density_scale: float | None = None
    background_rgb: tuple = (0.0, 0.0, 0.0)
    rng_policy: str = "stratified"
    aabb_min: tuple = (-1.0, -1.0, -1.0)
    aabb_max: tuple = (1.0, 1.0, 1.0)
    work_dtype: str = "float32"  # optimization dtype; the result is float64

    def __post_init__(self):
        if isinstance(self.final_resolution, int):
            self.final_resolution = (self.final_resolution,) * 3
        self.final_resolution = tuple(int(r) for r in self.final_resolution)
        d = int(self.start_divisor)
        if d < 1 or (d & (d - 1)) != 0:
            raise ValueError(f"start_divisor must be a power of two, got {d}")
        for r in self.final_resolution:
            if r % d != 0 or r // d < 2:
                raise ValueError(f"start_divisor {d} must divide final resolution {r} "
                                 "leaving at least 2 nodes")
        self.start_divisor = d
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.work_dtype not in ("float32", "float64"):
            raise ValueError("work_dtype must be float32 or float64")

    def level_resolutions(self) -> list:
        """[start, start*2, ..., final] per axis; e.g. 64 / 16 -> 4, 8, 16, 32, 64."""
        levels = [tuple(r // self.start_divisor for r in self.final_resolution)]
        while levels[-1] != self.final_resolution:
            levels.append(tuple(min(2 * r, f) for r, f in
                                zip(levels[-1], self.final_resolution)))
        return levels

    def render_config(self, seed: int = 0) -> RenderConfig:
        return RenderConfig(samples_per_ray=self.samples_per_ray,
                            density_scale=self.density_scale,
                            background_rgb=self.background_rgb,
                            rng_policy=self.rng_policy, seed=seed)


def psnr(image_a, image_b) -> float:
    """10*log10(1/mse) in dB against a [0,1] peak, capped at 99 dB."""
    a = as_image_array(image_a)
    b = as_image_array(image_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def split_holdout(dataset: PosedImageSet, every: int = 8):
    """(train, holdout) split keeping every `every`-th image (0, 8, ...) out."""
    hold = [i for i in range(len(dataset)) if i % every == 0]
    train = [i for i in range(len(dataset)) if i % every != 0]
    if not train:
        raise ValueError("holdout split leaves no training images")
    pick = lambda idx: PosedImageSet(images=[dataset.images[i] for i in idx],
                                     cameras=[dataset.cameras[i] for i in idx])
    return pick(train), pick(hold)


def _initial_grid(resolution, cfg: ReconConfig, dtype) -> FeatureGrid:
    data = torch.empty(*resolution, 4, dtype=dtype)
    for c, v in enumerate(INIT_RAW):
        data[..., c] = v
    return FeatureGrid(data, cfg.aabb_min, cfg.aabb_max)


def reconstruct(dataset: PosedImageSet, cfg: ReconConfig, rng: np.random.Generator,
                progress=None, log_every: int = 200) -> FeatureGrid:
    """Fit a grid to the dataset by batched random-ray MSE under Adam.

    Each step is projected back into the raw-feature band: after the Adam
    update the grid is clamped to [-1, 1], so the returned artifact is
    representable by the tanh-bounded generator stages that consume it.

    `progress`, when given, is called with {"level", "resolution", "batch",
    "loss"} records every log_every batches and at each level end.  Raises
    DivergenceError (naming level and batch) if a batch loss goes non-finite.
    Deterministic given (dataset, cfg, rng state).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    dtype = torch.float32 if cfg.work_dtype == "float32" else torch.float64
    h, w = dataset.image_shape
    n_pix = h * w

    # rays depend only on cameras and the AABB, so build them once
    us, vs = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    us, vs = us.reshape(-1), vs.reshape(-1)
    all_origins, all_dirs, all_near, all_far, all_rgb = [], [], [], [], []
    for im, cam in zip(dataset.images, dataset.cameras):
        o, d, tn, tf = _pixel_rays(cam, us, vs, np.asarray(cfg.aabb_min),
                                   np.asarray(cfg.aabb_max))
        all_origins.append(o)
        all_dirs.append(d)
        all_near.append(tn)
        all_far.append(tf)
        all_rgb.append(im.reshape(-1, 3))
    origins = np.concatenate(all_origins)
    dirs = np.concatenate(all_dirs)
    near = np.concatenate(all_near)
    far = np.concatenate(all_far)
    targets = np.concatenate(all_rgb)
    total = len(dataset) * n_pix

    levels = cfg.level_resolutions()
    grid = _initial_grid(levels[0], cfg, dtype)
    render_cfg = cfg.render_config(seed=int(rng.integers(0, 2 ** 31)))

    for level, resolution in enumerate(levels):
        if level > 0:
            grid = upsample2x(grid)
            if grid.resolution != resolution:
                raise AssertionError(f"level schedule drift: {grid.resolution} vs {resolution}")
        data = grid.data.detach().to(dtype).requires_grad_(True)
        grid = FeatureGrid(data, grid.aabb_min, grid.aabb_max)
        opt = torch.optim.Adam([data], lr=cfg.learning_rate * cfg.lr_decay ** level,
                               betas=cfg.adam_betas)
        for batch in range(cfg.batches_per_level):
            idx = rng.integers(0, total, size=cfg.rays_per_batch)
            rgb = _march(grid, origins[idx], dirs[idx], near[idx], far[idx],
                         render_cfg, idx.astype(np.uint64))
            target = torch.as_tensor(targets[idx], dtype=dtype)
            loss = ((rgb - target) ** 2).mean()
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at level {level} ({resolution}), batch {batch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                # projected step: raw features stay in the grid's [-1, 1]
                # band (interp-then-clamp would otherwise blow corners up
                # to sharpen edges, leaving the range downstream generators
                # can emit)
                data.clamp_(-1.0, 1.0)
            if progress is not None and (batch % log_every == 0
                                         or batch == cfg.batches_per_level - 1):
                progress({"level": level, "resolution": list(resolution),
                          "batch": batch, "loss": float(loss.detach())})
        grid = FeatureGrid(data.detach(), grid.aabb_min, grid.aabb_max)

    return FeatureGrid(grid.data.double(), grid.aabb_min, grid.aabb_max)

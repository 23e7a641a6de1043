"""Single-scene evaluation: view-averaged Frechet distance and seed diversity.

Feature statistics are per image (mean/covariance over spatial locations of
a fixed shallow conv net), so the Frechet distance compares internal patch
statistics of two images rather than two image sets.  The extractor weights
come from a fixed published seed, which keeps the metric self-contained; a
pretrained extractor can be plugged in for parity with classifier-based
scores, at the price of different absolute values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

from .relu_field import FeatureGrid
from .renderer import PoseModel, RenderConfig, render_image, render_patch_2d, sample_pose
from .remix_gan import checkpoint_hash, sample_noise, stack_hash
from .scene_io import as_image_array
from .seeding import derive_seed

EXTRACTOR_SEED = 311
SQRTM_EPS = 1e-6
_SYM_TOL = 1e-6


class FeatureExtractor:
    """Fixed-random 2-layer conv feature map, image (H, W, 3) -> (H*W, width).

    Deterministic given the seed; `name` is recorded in evaluation reports.
    """

    def __init__(self, seed: int = EXTRACTOR_SEED, width: int = 64):
        rng = np.random.default_rng(derive_seed(seed, "feature-extractor"))
        def he(shape):
            fan_in = int(np.prod(shape[1:]))
            return torch.as_tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in),
                                   dtype=torch.float32)
        self.w1 = he((width, 3, 3, 3))
        self.w2 = he((width, width, 3, 3))
        self.width = width
        self.name = "random-v1"

    def features(self, image) -> np.ndarray:
        """Per-location activations, shape (H*W, width)."""
        im = torch.as_tensor(as_image_array(image), dtype=torch.float32)
        x = im.permute(2, 0, 1).unsqueeze(0)
        x = F.leaky_relu(F.conv2d(x, self.w1, padding=1), 0.2)
        x = F.conv2d(x, self.w2, padding=1)
        return x[0].permute(1, 2, 0).reshape(-1, self.width).double().numpy()

    def stats(self, image) -> tuple:
        """(mean, covariance) of the per-location features of one image."""
        f = self.features(image)
        return f.mean(axis=0), np.cov(f, rowvar=False)


@dataclass
class MetricsConfig:
    n_views: int = 16
    n_seeds: int = 16
    master_seed: int = 0
    samples_per_ray: int = 128
    density_scale: float | None = None
    background_rgb: tuple = (0.0, 0.0, 0.0)
    allow_untrained: bool = False  # permit scoring an untrained stack (baselines)
    extractor: object = None  # None -> fixed-random extractor
    extractor_seed: int = EXTRACTOR_SEED
    patch_corner: tuple | None = None  # diversity window; None -> centered
    patch_size: tuple | None = None

    def render_config(self) -> RenderConfig:
        # metrics render deterministically so scores are a pure function of
        # (checkpoint, master_seed)
        return RenderConfig(samples_per_ray=self.samples_per_ray,
                            density_scale=self.density_scale,
                            background_rgb=self.background_rgb,
                            rng_policy="deterministic_midpoint")

    def make_extractor(self) -> FeatureExtractor:
        return self.extractor if self.extractor is not None \
            else FeatureExtractor(self.extractor_seed)


def _validate_cov(c: np.ndarray, name: str):
    if np.abs(c - c.T).max() > _SYM_TOL:
        raise ValueError(f"{name} is not symmetric")
    eigs = np.linalg.eigvalsh(c)
    if eigs.min() < -_SYM_TOL:
        raise ValueError(f"{name} has negative eigenvalue {eigs.min():.3g}")


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Squared Frechet distance |mu1-mu2|^2 + Tr(C1 + C2 - 2 (C1 C2)^1/2).

    The matrix square root is stabilized with eps*I when round-off makes the
    product non-PSD; the result is clamped at 0.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (len(mu1), len(mu1)):
        raise ValueError(f"dimension mismatch: mu {mu1.shape}/{mu2.shape}, "
                         f"cov {cov1.shape}/{cov2.shape}")
    _validate_cov(cov1, "cov1")
    _validate_cov(cov2, "cov2")

    diff = mu1 - mu2
    covmean = scipy.linalg.sqrtm(cov1 @ cov2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    if not np.isfinite(covmean).all():
        eye = SQRTM_EPS * np.eye(len(mu1))
        covmean = scipy.linalg.sqrtm((cov1 + eye) @ (cov2 + eye))
        if np.iscomplexobj(covmean):
            covmean = covmean.real
    d2 = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))
    return max(d2, 0.0)


def visual_quality(reference: FeatureGrid, stack, pose_model: PoseModel,
                   n_views: int | None = None, cfg: MetricsConfig | None = None) -> float:
    """Mean over views of the Frechet distance between per-image feature
    statistics of the reference render and a fixed-seed generated render
    (lower is better)."""
    cfg = MetricsConfig() if cfg is None else cfg
    n_views = cfg.n_views if n_views is None else int(n_views)
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    if not stack.is_trained and not cfg.allow_untrained:
        raise ValueError("stack has untrained stages; pass allow_untrained to score anyway")

    extractor = cfg.make_extractor()
    z = sample_noise(stack.noise_spatial, derive_seed(cfg.master_seed, "visual-quality-z"))
    generated = stack.generate(z)
    rcfg = cfg.render_config()
    rng = np.random.default_rng(derive_seed(cfg.master_seed, "visual-quality-views"))
    stage = len(pose_model.focal_schedule) - 1
    total = 0.0
    for _ in range(n_views):
        cam = sample_pose(pose_model, stage, rng)
        mu_r, c_r = extractor.stats(render_image(reference, cam, rcfg))
        mu_g, c_g = extractor.stats(render_image(generated, cam, rcfg))
        total += frechet_distance(mu_r, c_r, mu_g, c_g)
    return total / n_views


def patch_variance(patches) -> float:
    """Mean over pixels/channels of the across-sample population variance."""
    arr = np.asarray(patches, dtype=np.float64)
    if arr.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    return float(np.var(arr, axis=0, ddof=0).mean())


def scene_diversity(stack, pose_model: PoseModel, patch_spec=None,
                    n_seeds: int | None = None, cfg: MetricsConfig | None = None) -> float:
    """Across-seed variance of one fixed rendered patch window (higher is
    better; 0 means the generator ignores z)."""
    cfg = MetricsConfig() if cfg is None else cfg
    n_seeds = cfg.n_seeds if n_seeds is None else int(n_seeds)
    if n_seeds < 2:
        raise ValueError("n_seeds must be >= 2")
    if patch_spec is None:
        if cfg.patch_corner is not None and cfg.patch_size is not None:
            patch_spec = (cfg.patch_corner, cfg.patch_size)
        else:
            w, h = pose_model.width, pose_model.height
            patch_spec = ((w // 4, h // 4), (w // 2, h // 2))
    corner, size = patch_spec

    cam = sample_pose(pose_model, len(pose_model.focal_schedule) - 1,
                      np.random.default_rng(derive_seed(cfg.master_seed, "diversity-camera")))
    rcfg = cfg.render_config()
    patches = []
    for i in range(n_seeds):
        z = sample_noise(stack.noise_spatial, derive_seed(cfg.master_seed, f"diversity-z-{i}"))
        grid = stack.generate(z)
        patches.append(as_image_array(render_patch_2d(grid, cam, rcfg, corner, size)))
    return patch_variance(np.stack(patches))


def evaluate_report(reference: FeatureGrid, stack, pose_model: PoseModel,
                    cfg: MetricsConfig | None = None, checkpoint_dir=None) -> dict:
    """Run both metrics and assemble the report record.

    checkpoint_hash comes from the on-disk checkpoint when a directory is
    given (missing -> FileNotFoundError), else from the in-memory parameters.
    """
    cfg = MetricsConfig() if cfg is None else cfg
    if checkpoint_dir is not None:
        ckpt_hash = checkpoint_hash(checkpoint_dir)
    else:
        ckpt_hash = stack_hash(stack)
    return {
        "visual_quality": visual_quality(reference, stack, pose_model, cfg.n_views, cfg),
        "scene_diversity": scene_diversity(stack, pose_model, None, cfg.n_seeds, cfg),
        "n_views": cfg.n_views,
        "n_seeds": cfg.n_seeds,
        "extractor": cfg.make_extractor().name if cfg.extractor is None else "custom",
        "master_seed": cfg.master_seed,
        "checkpoint_hash": ckpt_hash,
    }

"""Single-scene 3D remix pipeline.

Reconstructs a voxel feature grid from posed images by differentiable
raymarching, then trains a progressive 3D patch GAN that maps spatial noise
grids to view-consistent remixes of that one scene, with Frechet-style
evaluation metrics and a CLI on top.
"""

from .relu_field import FeatureGrid, field_eval, trilerp, upsample2x
from .renderer import Camera, PoseModel, Ray, RenderConfig, render_image
from .scene_io import PosedImageSet, load_dataset, read_grid, save_dataset, write_grid

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "FeatureGrid",
    "PoseModel",
    "PosedImageSet",
    "Ray",
    "RenderConfig",
    "field_eval",
    "load_dataset",
    "read_grid",
    "render_image",
    "save_dataset",
    "trilerp",
    "upsample2x",
    "write_grid",
    "__version__",
]

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_grid():
    """Random 2x2x2 float64 grid with raw values inside the active clamp
    region (no kinks), for gradient and interpolation checks."""
    from scene_remix.relu_field import FeatureGrid

    r = np.random.default_rng(7)
    data = r.uniform(0.1, 0.9, size=(2, 2, 2, 4))
    return FeatureGrid(torch.tensor(data, dtype=torch.float64), (-1, -1, -1), (1, 1, 1))

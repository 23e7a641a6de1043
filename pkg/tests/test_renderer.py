"""Raymarching against closed forms, finite differences, and crop identities."""

import math

import numpy as np
import pytest
import torch

from scene_remix.relu_field import FeatureGrid
from scene_remix.renderer import (
    PoseModel,
    Ray,
    RenderConfig,
    _sample_offsets,
    _slab_intersect,
    generate_rays,
    grad_march,
    look_at,
    march_ray,
    march_rays,
    render_image,
    render_patch_2d,
    sample_pose,
)


def _camera_towards_origin(eye=(0.0, 0.0, -3.0), size=8, focal=8.0):
    return look_at(eye, (0.0, 0.0, 0.0), focal=focal, width=size, height=size)


# ---------------------------------------------------------------------------
# Ray and config validation
# ---------------------------------------------------------------------------

def test_ray_validation():
    r = Ray(origin=(0, 0, -3), direction=(0, 0, 1), t_near=2.0, t_far=4.0)
    assert not r.degenerate
    assert Ray((0, 0, 0), (1, 0, 0), 0.0, 0.0).degenerate
    with pytest.raises(ValueError, match="unit"):
        Ray((0, 0, 0), (0, 0, 2), 0.0, 1.0)
    with pytest.raises(ValueError, match="t_near"):
        Ray((0, 0, 0), (0, 0, 1), 2.0, 1.0)


def test_render_config_validation():
    with pytest.raises(ValueError, match="samples_per_ray"):
        RenderConfig(samples_per_ray=1)
    with pytest.raises(ValueError, match="rng_policy"):
        RenderConfig(rng_policy="sobol")
    with pytest.raises(ValueError, match="density_scale"):
        RenderConfig(density_scale=0.0)
    with pytest.raises(ValueError, match="background"):
        RenderConfig(background_rgb=(0.0, 1.2, 0.0))


def test_default_density_scale_is_25_over_diagonal():
    grid = FeatureGrid.filled(2, (0.5, 0, 0, 0))
    cfg = RenderConfig()
    np.testing.assert_allclose(cfg.resolve_scale(grid), 25.0 / (2.0 * math.sqrt(3.0)))
    assert RenderConfig(density_scale=3.0).resolve_scale(grid) == 3.0


# ---------------------------------------------------------------------------
# AABB intersection
# ---------------------------------------------------------------------------

def test_slab_intersect_axis_aligned_oracle():
    lo, hi = np.full(3, -1.0), np.full(3, 1.0)
    near, far = _slab_intersect(np.array([[0.0, 0.0, -3.0]]),
                                np.array([[0.0, 0.0, 1.0]]), lo, hi)
    np.testing.assert_allclose([near[0], far[0]], [2.0, 4.0])

    # origin inside: near clamps to 0
    near, far = _slab_intersect(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]), lo, hi)
    np.testing.assert_allclose([near[0], far[0]], [0.0, 1.0])

    # miss encodes as near == far == 0
    near, far = _slab_intersect(np.array([[0.0, 5.0, -3.0]]),
                                np.array([[0.0, 0.0, 1.0]]), lo, hi)
    assert near[0] == far[0] == 0.0

    # origin exactly on a slab plane must not poison the result with NaN
    near, far = _slab_intersect(np.array([[-1.0, 0.0, 0.0]]),
                                np.array([[1.0, 0.0, 0.0]]), lo, hi)
    np.testing.assert_allclose([near[0], far[0]], [0.0, 2.0])


def test_slab_intersect_diagonal_oracle():
    d = np.full(3, 1.0 / math.sqrt(3.0))
    o = -3.0 * d
    near, far = _slab_intersect(o[None], d[None], np.full(3, -1.0), np.full(3, 1.0))
    np.testing.assert_allclose([near[0], far[0]],
                               [3.0 - math.sqrt(3.0), 3.0 + math.sqrt(3.0)], atol=1e-12)


# ---------------------------------------------------------------------------
# Ray generation and cameras
# ---------------------------------------------------------------------------

def test_generate_rays_units_and_bounds():
    cam = _camera_towards_origin()
    rays = generate_rays(cam, [(0, 0), (7, 7), (3, 4)])
    assert len(rays) == 3
    for r in rays:
        np.testing.assert_allclose(np.linalg.norm(r.direction), 1.0, atol=1e-12)
        np.testing.assert_allclose(r.origin, cam.center)
    with pytest.raises(ValueError, match="bounds"):
        generate_rays(cam, [(8, 0)])


def test_center_pixel_ray_points_at_target():
    cam = _camera_towards_origin(eye=(2.0, 1.0, -2.5), size=9, focal=20.0)
    # odd size: pixel (4,4) center + 0.5 hits the principal point exactly
    (ray,) = generate_rays(cam, [(4, 4)])
    to_target = -np.asarray(cam.center) / np.linalg.norm(cam.center)
    np.testing.assert_allclose(ray.direction, to_target, atol=1e-12)


def test_look_at_conventions():
    cam = look_at((0, -4, 0), (0, 0, 0), focal=8.0, width=8, height=8)
    np.testing.assert_allclose(cam.forward, [0, 1, 0], atol=1e-12)
    # y axis of camera space points downward in world (negative z component)
    assert cam.rotation[1] @ np.array([0.0, 0.0, 1.0]) < 0
    # right-handed: x cross y == z row
    np.testing.assert_allclose(np.cross(cam.rotation[0], cam.rotation[1]),
                               cam.rotation[2], atol=1e-12)

    top = look_at((0, 0, 5), (0, 0, 0), focal=8.0, width=8, height=8)  # pole fallback
    np.testing.assert_allclose(top.forward, [0, 0, -1], atol=1e-12)

    with pytest.raises(ValueError, match="coincide"):
        look_at((1, 1, 1), (1, 1, 1), 8.0, 8, 8)


def test_pose_model_for_grid_and_sampling():
    grid = FeatureGrid.filled(2, (0.5, 0, 0, 0))
    model = PoseModel.for_grid(grid, image_size=16, focal=16.0, n_stages=3)
    assert model.focal_schedule[-1] == 16.0
    np.testing.assert_allclose(model.focal_schedule[0], 8.0)  # default start 0.5x
    np.testing.assert_allclose(model.radius, 2.5 * math.sqrt(3.0))

    rng = np.random.default_rng(0)
    lo, hi = model.elevation_range
    for _ in range(20):
        cam = sample_pose(model, stage=1, rng=rng)
        offset = cam.center - model.center
        np.testing.assert_allclose(np.linalg.norm(offset), model.radius, atol=1e-9)
        elev = math.asin(offset[2] / model.radius)
        assert lo - 1e-9 <= elev <= hi + 1e-9
        assert cam.focal == model.focal_schedule[1]
    with pytest.raises(ValueError, match="stage"):
        sample_pose(model, stage=3, rng=rng)


def test_pose_model_validation():
    with pytest.raises(ValueError, match="radius"):
        PoseModel(center=np.zeros(3), radius=0.0, elevation_range=(0.1, 0.4),
                  focal_schedule=[8.0], width=8, height=8)
    with pytest.raises(ValueError, match="elevation"):
        PoseModel(center=np.zeros(3), radius=1.0, elevation_range=(0.5, 0.1),
                  focal_schedule=[8.0], width=8, height=8)
    with pytest.raises(ValueError, match="focal_schedule"):
        PoseModel(center=np.zeros(3), radius=1.0, elevation_range=(0.1, 0.5),
                  focal_schedule=[], width=8, height=8)


# ---------------------------------------------------------------------------
# Compositing: closed forms and identities
# ---------------------------------------------------------------------------

def test_homogeneous_medium_closed_form():
    """Constant-density media integrate exactly: c*(1-e^-sL) + bg*e^-sL."""
    rng = np.random.default_rng(3)
    for _ in range(5):
        sigma = rng.uniform(0.05, 0.95)
        color = rng.uniform(0.0, 1.0, size=3)
        bg = tuple(rng.uniform(0.0, 1.0, size=3))
        grid = FeatureGrid.filled(3, (sigma, *color))
        cfg = RenderConfig(samples_per_ray=16, background_rgb=bg,
                           rng_policy="deterministic_midpoint")
        ray = Ray((0, 0, -3), (0, 0, 1), 2.0, 4.0)
        out = march_ray(grid, ray, cfg)
        tau = sigma * cfg.resolve_scale(grid) * 2.0
        expected = color * (1 - math.exp(-tau)) + np.asarray(bg) * math.exp(-tau)
        np.testing.assert_allclose(out, expected, atol=1e-12)


def test_compositing_identity_random_rays(rng):
    data = torch.from_numpy(rng.uniform(-1, 1, size=(4, 4, 4, 4)))
    grid = FeatureGrid(data, (-1, -1, -1), (1, 1, 1))
    cam = _camera_towards_origin(eye=(1.5, -2.0, 2.0), size=6)
    coords = [(u, v) for u in range(6) for v in range(6)]
    rays = generate_rays(cam, coords)
    cfg = RenderConfig(samples_per_ray=32, rng_policy="stratified", seed=5)
    _, aux = march_rays(grid, rays, cfg, return_aux=True)
    total = aux["weights"].sum(axis=1) + aux["t_final"]
    np.testing.assert_allclose(total, 1.0, atol=1e-12)  # telescoping, exact in f64


def test_degenerate_ray_returns_background():
    grid = FeatureGrid.filled(2, (0.9, 1, 1, 1))
    cfg = RenderConfig(background_rgb=(0.2, 0.4, 0.6))
    out = march_ray(grid, Ray((5, 5, 5), (0, 0, 1), 0.0, 0.0), cfg)
    np.testing.assert_allclose(out, [0.2, 0.4, 0.6], atol=1e-15)


def test_march_rays_rejects_empty_batch():
    grid = FeatureGrid.filled(2, (0.5, 0, 0, 0))
    with pytest.raises(ValueError, match="empty"):
        march_rays(grid, [], RenderConfig())


def test_occlusion_ordering():
    """A dense near slab hides everything behind it."""
    data = torch.zeros(4, 2, 2, 4, dtype=torch.float64)
    data[..., 0] = -1.0
    data[0:2, :, :, 0] = 1.0   # front half along x: opaque red
    data[0:2, :, :, 1] = 1.0
    data[2:4, :, :, 0] = 1.0   # back half: green (should stay hidden)
    data[2:4, :, :, 2] = 1.0
    grid = FeatureGrid(data, (-1, -1, -1), (1, 1, 1))
    cfg = RenderConfig(samples_per_ray=512, density_scale=500.0)
    out = march_ray(grid, Ray((-3, 0.0, 0.0), (1, 0, 0), 2.0, 4.0), cfg)
    assert out[0] > 0.95 and out[1] < 0.05


# ---------------------------------------------------------------------------
# Sampling policies
# ---------------------------------------------------------------------------

def test_sample_offsets_policies():
    pix = np.arange(5, dtype=np.uint64)
    mid = _sample_offsets(RenderConfig(samples_per_ray=8), pix)
    np.testing.assert_allclose(mid, np.broadcast_to((np.arange(8) + 0.5) / 8.0, (5, 8)))

    strat = _sample_offsets(RenderConfig(samples_per_ray=8, rng_policy="stratified",
                                         seed=1), pix)
    bins = np.floor(strat * 8).astype(int)
    np.testing.assert_array_equal(bins, np.broadcast_to(np.arange(8), (5, 8)))
    assert not np.allclose(strat, mid)

    uni = _sample_offsets(RenderConfig(samples_per_ray=8, rng_policy="uniform_jitter",
                                       seed=1), pix)
    shift = uni - np.arange(8) / 8.0
    assert np.ptp(shift, axis=1).max() < 1e-15  # one shared offset per ray
    assert np.ptp(shift[:, 0]) > 0  # but different across rays


def test_stratified_render_is_seed_deterministic(tiny_grid):
    cam = _camera_towards_origin(size=4)
    cfg1 = RenderConfig(samples_per_ray=16, rng_policy="stratified", seed=7)
    cfg2 = RenderConfig(samples_per_ray=16, rng_policy="stratified", seed=7)
    cfg3 = RenderConfig(samples_per_ray=16, rng_policy="stratified", seed=8)
    a = render_image(tiny_grid, cam, cfg1)
    b = render_image(tiny_grid, cam, cfg2)
    c = render_image(tiny_grid, cam, cfg3)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


@pytest.mark.parametrize("policy", ["deterministic_midpoint", "stratified", "uniform_jitter"])
def test_patch_render_equals_image_crop(policy, rng):
    """Counter-based jitter keys rays by pixel index, so patches match crops."""
    data = torch.from_numpy(rng.uniform(-1, 1, size=(3, 3, 3, 4)))
    grid = FeatureGrid(data, (-1, -1, -1), (1, 1, 1))
    cam = _camera_towards_origin(eye=(0.5, -2.5, 1.0), size=10, focal=10.0)
    cfg = RenderConfig(samples_per_ray=12, rng_policy=policy, seed=3)
    full = render_image(grid, cam, cfg)
    patch = render_patch_2d(grid, cam, cfg, corner=(2, 5), size=(4, 3))
    assert torch.equal(patch, full[5:8, 2:6, :])


def test_render_patch_bounds():
    grid = FeatureGrid.filled(2, (0.5, 0, 0, 0))
    cam = _camera_towards_origin(size=8)
    cfg = RenderConfig(samples_per_ray=4)
    with pytest.raises(ValueError, match="exceeds"):
        render_patch_2d(grid, cam, cfg, corner=(6, 0), size=(4, 2))
    with pytest.raises(ValueError, match="positive"):
        render_patch_2d(grid, cam, cfg, corner=(0, 0), size=(0, 2))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def test_grad_march_matches_central_differences(rng):
    data = torch.from_numpy(rng.uniform(0.1, 0.9, size=(2, 2, 2, 4)))
    grid = FeatureGrid(data, (-1, -1, -1), (1, 1, 1))
    cam = _camera_towards_origin(size=3, focal=3.0)
    rays = generate_rays(cam, [(u, v) for u in range(3) for v in range(3)])
    cfg = RenderConfig(samples_per_ray=8, rng_policy="stratified", seed=2)
    targets = rng.uniform(0, 1, size=(9, 3))
    g = grad_march(grid, rays, cfg, targets)
    assert g.shape == (2, 2, 2, 4)

    def loss_at(d):
        rgb = march_rays(FeatureGrid(d, grid.aabb_min, grid.aabb_max), rays, cfg)
        return float(np.mean((rgb - targets) ** 2))

    h = 1e-5
    for idx in [(0, 0, 0, 0), (1, 0, 1, 2), (0, 1, 1, 3), (1, 1, 1, 1)]:
        dp = data.clone(); dp[idx] += h
        dm = data.clone(); dm[idx] -= h
        fd = (loss_at(dp) - loss_at(dm)) / (2 * h)
        np.testing.assert_allclose(g[idx], fd, rtol=1e-5, atol=1e-9)


def test_grad_march_zero_in_clamp_dead_zone():
    grid = FeatureGrid.filled(2, (-1.0, 0.5, 0.5, 0.5))  # density deep in dead zone
    ray = Ray((0, 0, -3), (0, 0, 1), 2.0, 4.0)
    g = grad_march(grid, [ray], RenderConfig(samples_per_ray=8), [(1.0, 1.0, 1.0)])
    np.testing.assert_array_equal(g[..., 0], 0.0)


def test_grad_march_all_degenerate_rays():
    grid = FeatureGrid.filled(2, (0.5, 0.5, 0.5, 0.5))
    ray = Ray((5, 5, 5), (0, 0, 1), 0.0, 0.0)
    g = grad_march(grid, [ray], RenderConfig(samples_per_ray=4), [(0, 0, 0)])
    np.testing.assert_array_equal(g, 0.0)


def test_render_image_keeps_autograd_graph():
    data = torch.full((2, 2, 2, 4), 0.5, dtype=torch.float64, requires_grad=True)
    grid = FeatureGrid(data, (-1, -1, -1), (1, 1, 1))
    out = render_image(grid, _camera_towards_origin(size=2, focal=2.0),
                       RenderConfig(samples_per_ray=4))
    assert out.requires_grad
    out.sum().backward()
    assert data.grad is not None and float(data.grad.abs().sum()) > 0

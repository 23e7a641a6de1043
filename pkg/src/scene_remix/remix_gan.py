"""Progressive multi-stage 3D patch GAN over raw feature grids.

Stage 0 decodes a spatial noise grid into the coarsest raw grid; every later
stage doubles the resolution and adds a residual on top of the (frozen)
earlier stages.  Two WGAN-GP critics score rendered 2D patches and raw 3D
sub-blocks; a fixed reconstruction noise z* is pinned to the reference grid
through 2D and 3D MSE terms, which anchors the model to the exemplar while
other noise grids remix it.

Training losses combine as

    gamma2d * adv2d + gamma3d * adv3d + rho2d * mse2d + rho3d * mse3d

with each term sampled from its own sub-stream so that zeroing one weight
never changes another term's draw (the decomposition is tested).
"""

from __future__ import annotations

import hashlib
import json
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .relu_field import N_CHANNELS, FeatureGrid, downsample2x_mean, random_patch_3d
from .renderer import PoseModel, RenderConfig, render_patch_2d, sample_pose
from .seeding import derive_seed

N_Z = 4
MIN_NOISE_EXTENT = 2  # below this the padding dominates the receptive field
CKPT_FORMAT = "3ingan-ckpt-v1"


@dataclass
class LossWeights:
    gamma2d: float = 1.0
    gamma3d: float = 1.0
    rho2d: float = 10.0
    rho3d: float = 10.0
    gp_lambda: float = 10.0

    def __post_init__(self):
        for name in ("gamma2d", "gamma3d", "rho2d", "rho3d", "gp_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class NoiseGrid:
    """Spatial grid of latent vectors, (x, y, z, N_Z), i.i.d. standard normal.

    `seed` identifies the stream that per-stage injected noise is derived
    from, so a NoiseGrid fully determines a generated sample.
    """

    values: torch.Tensor
    seed: int = 0

    def __post_init__(self):
        self.values = torch.as_tensor(self.values, dtype=torch.float32)
        if self.values.dim() != 4 or self.values.shape[-1] != N_Z:
            raise ValueError(f"noise grid must be (x, y, z, {N_Z}), got {tuple(self.values.shape)}")
        if not bool(torch.isfinite(self.values).all()):
            raise ValueError("noise grid contains NaN/Inf")
        self.seed = int(self.seed)

    @property
    def spatial_shape(self) -> tuple:
        return tuple(int(s) for s in self.values.shape[:3])


def sample_noise(spatial_shape, seed: int) -> NoiseGrid:
    """Standard-normal NoiseGrid, a pure function of (shape, seed)."""
    shape = tuple(int(s) for s in spatial_shape)
    rng = np.random.default_rng(derive_seed(seed, "noise-grid"))
    return NoiseGrid(rng.standard_normal((*shape, N_Z)), seed=int(seed))


@dataclass
class GanConfig:
    n_stages: int = 4
    width: int = 32
    layers_per_stage: int = 5
    noise_spatial: tuple = (8, 8, 8)
    iters_per_stage: object = 20000  # int, or one int per stage
    n_critic: int = 3
    lr_generator: float = 5e-4
    lr_critic: float = 5e-4
    adam_betas: tuple = (0.5, 0.9)
    patch_3d: int = 12
    patch_2d: int = 48
    samples_per_ray: int = 64
    density_scale: float | None = None
    background_rgb: tuple = (0.0, 0.0, 0.0)
    aabb_min: tuple = (-1.0, -1.0, -1.0)
    aabb_max: tuple = (1.0, 1.0, 1.0)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.noise_spatial = tuple(int(s) for s in self.noise_spatial)
        if len(self.noise_spatial) != 3 or min(self.noise_spatial) < MIN_NOISE_EXTENT:
            raise ValueError(f"noise_spatial must be 3 ints >= {MIN_NOISE_EXTENT}")
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if self.layers_per_stage < 3:
            raise ValueError("layers_per_stage must be >= 3")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.iters_per_stage, (list, tuple)):
            self.iters_per_stage = [int(i) for i in self.iters_per_stage]
            if len(self.iters_per_stage) != self.n_stages:
                raise ValueError("iters_per_stage list must have one entry per stage")

    def iters_for(self, stage: int) -> int:
        if isinstance(self.iters_per_stage, list):
            return self.iters_per_stage[stage]
        return int(self.iters_per_stage)

    def stage_resolution(self, stage: int) -> tuple:
        """Coarsest = noise extent x2 (stage-0 expansion), then x2 per stage."""
        f = 2 * 2 ** stage
        return tuple(n * f for n in self.noise_spatial)

    def render_config(self, seed: int = 0) -> RenderConfig:
        return RenderConfig(samples_per_ray=self.samples_per_ray,
                            density_scale=self.density_scale,
                            background_rgb=self.background_rgb,
                            rng_policy="stratified", seed=seed)

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown GanConfig keys: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        for key in ("noise_spatial", "adam_betas", "background_rgb", "aabb_min", "aabb_max"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class _Stage0Net(nn.Module):
    """NoiseGrid -> coarsest raw grid; one 2x transposed conv then convs."""

    def __init__(self, width: int, layers: int):
        super().__init__()
        mods = [nn.ConvTranspose3d(N_Z, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(layers - 2):
            mods += [nn.Conv3d(width, width, 3, padding=1, padding_mode="replicate"),
                     nn.LeakyReLU(0.2)]
        mods += [nn.Conv3d(width, N_CHANNELS, 3, padding=1, padding_mode="replicate"),
                 nn.Tanh()]
        self.net = nn.Sequential(*mods)

    def forward(self, z):  # (1, N_Z, x, y, z) -> (1, 4, 2x, 2y, 2z)
        return self.net(z)


class _ResidualStageNet(nn.Module):
    """(upsampled previous output, injected noise) -> raw residual in (-1,1)."""

    def __init__(self, width: int, layers: int):
        super().__init__()
        mods = [nn.Conv3d(N_CHANNELS + N_Z, width, 3, padding=1, padding_mode="replicate"),
                nn.LeakyReLU(0.2)]
        for _ in range(layers - 3):
            mods += [nn.Conv3d(width, width, 3, padding=1, padding_mode="replicate"),
                     nn.LeakyReLU(0.2)]
        mods += [nn.Conv3d(width, N_CHANNELS, 3, padding=1, padding_mode="replicate"),
                 nn.Tanh()]
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


class PatchCritic(nn.Module):
    """Fully-convolutional patch critic: conv stack + global mean -> scalar.

    No normalization layers (gradient penalty) and no dense layers, so any
    patch size >= 1 works within a stage.
    """

    def __init__(self, dims: int, in_channels: int, width: int = 32, layers: int = 4):
        super().__init__()
        conv = {2: nn.Conv2d, 3: nn.Conv3d}[dims]
        mods = [conv(in_channels, width, 3, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(layers - 2):
            mods += [conv(width, width, 3, padding=1), nn.LeakyReLU(0.2)]
        mods += [conv(width, 1, 3, padding=1)]
        self.net = nn.Sequential(*mods)

    def forward(self, x):  # (B, C, ...) -> (B,)
        return self.net(x).flatten(1).mean(dim=1)


@dataclass
class CriticPair:
    critic2d: nn.Module
    critic3d: nn.Module


def make_critics(cfg: GanConfig, seed: int) -> CriticPair:
    """Fresh critic pair; each stage trains against newly initialized critics."""
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "critics"))
        return CriticPair(critic2d=PatchCritic(2, 3, cfg.width),
                          critic3d=PatchCritic(3, N_CHANNELS, cfg.width))


class GeneratorStack:
    """Progressive generator: stage nets, trained flags, and the fixed z*.

    All stage networks are built (deterministically from master_seed) at
    construction; `trained[k]` records which have been fitted.  Stages before
    the one being trained are frozen: their parameters sit in no optimizer
    and the forward pass through them runs without grad.
    """

    def __init__(self, cfg: GanConfig, master_seed: int):
        self.cfg = cfg
        self.master_seed = int(master_seed)
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(master_seed, "generator-init"))
            self.stages = [_Stage0Net(cfg.width, cfg.layers_per_stage)]
            for _ in range(1, cfg.n_stages):
                self.stages.append(_ResidualStageNet(cfg.width, cfg.layers_per_stage))
        self.trained = [False] * cfg.n_stages
        self.z_star = sample_noise(cfg.noise_spatial, derive_seed(master_seed, "z-star"))

    @property
    def noise_spatial(self) -> tuple:
        return self.cfg.noise_spatial

    @property
    def last_stage(self) -> int:
        return self.cfg.n_stages - 1

    @property
    def is_trained(self) -> bool:
        return all(self.trained)

    def generate(self, z: NoiseGrid | None = None, up_to_stage: int | None = None,
                 grad_stages_from: int | None = None) -> FeatureGrid:
        """Decode z (default z*) through stages 0..up_to_stage.

        grad_stages_from (training only): stages before this index run under
        no_grad, the rest record autograd; the default records nothing, so
        plain sampling carries no graph.
        """
        z = self.z_star if z is None else z
        if up_to_stage is None:
            up_to_stage = self.last_stage
        if not (0 <= up_to_stage < len(self.stages)):
            raise ValueError(f"stage {up_to_stage} out of range [0, {len(self.stages)})")
        if min(z.spatial_shape) < MIN_NOISE_EXTENT:
            raise ValueError(f"noise extent {z.spatial_shape} below minimum {MIN_NOISE_EXTENT}")

        x = None
        for k in range(up_to_stage + 1):
            no_grad = grad_stages_from is None or k < grad_stages_from
            ctx = torch.no_grad() if no_grad else nullcontext()
            with ctx:
                if k == 0:
                    x = self.stages[0](z.values.permute(3, 0, 1, 2).unsqueeze(0))
                else:
                    up = F.interpolate(x, scale_factor=2.0, mode="trilinear",
                                       align_corners=True)
                    noise = _stage_noise(z, k, up.shape[2:])
                    res = self.stages[k](torch.cat([up, noise], dim=1))
                    x = torch.clamp(up + res, -1.0, 1.0)
        return FeatureGrid(x[0].permute(1, 2, 3, 0), self.cfg.aabb_min, self.cfg.aabb_max)


def _stage_noise(z: NoiseGrid, stage: int, spatial) -> torch.Tensor:
    """Injected noise for a residual stage, (1, N_Z, x, y, z); a pure
    function of (z.seed, stage, shape) so one z determines the sample."""
    rng = np.random.default_rng(derive_seed(z.seed, f"stage-{stage}-injection"))
    return torch.as_tensor(rng.standard_normal((1, N_Z, *map(int, spatial))),
                           dtype=torch.float32)


def generate(stack: GeneratorStack, z: NoiseGrid | None, up_to_stage: int | None = None) -> FeatureGrid:
    """Functional alias for GeneratorStack.generate."""
    return stack.generate(z, up_to_stage)


def retarget(stack: GeneratorStack, new_noise_shape, rng: np.random.Generator) -> FeatureGrid:
    """Sample z at a different spatial extent; fully-convolutional stages
    scale the output grid proportionally."""
    shape = tuple(int(s) for s in new_noise_shape)
    if len(shape) != 3 or min(shape) < MIN_NOISE_EXTENT:
        raise ValueError(f"noise shape {shape} below the receptive-field minimum "
                         f"({MIN_NOISE_EXTENT} per axis)")
    z = sample_noise(shape, int(rng.integers(0, 2 ** 62)))
    return stack.generate(z)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _as_batch(x) -> torch.Tensor:
    t = torch.as_tensor(x) if not isinstance(x, torch.Tensor) else x
    if t.dim() == 0 or t.shape[0] == 0:
        raise ValueError("empty batch")
    return t


def critic_loss_wgan(critic, real_batch, fake_batch, gp_lambda: float = 10.0,
                     rng: np.random.Generator | None = None) -> torch.Tensor:
    """mean(critic(fake)) - mean(critic(real)) + gp_lambda * penalty.

    The penalty is mean((|grad critic(x_hat)| - 1)^2) on per-pair uniform
    interpolates x_hat; a critic with no input dependence counts as gradient
    norm 0 (penalty 1).
    """
    real = _as_batch(real_batch)
    fake = _as_batch(fake_batch)
    if real.shape != fake.shape:
        raise ValueError(f"real/fake shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    w_term = critic(fake).mean() - critic(real).mean()

    if rng is None:
        rng = np.random.default_rng(0)
    eps_shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    eps = torch.as_tensor(rng.uniform(size=eps_shape), dtype=real.dtype)
    x_hat = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    score = critic(x_hat).sum()
    if score.requires_grad:
        (g,) = torch.autograd.grad(score, x_hat, create_graph=True, allow_unused=True)
    else:  # critic ignores its input entirely
        g = None
    if g is None:
        grad_norm = torch.zeros(real.shape[0], dtype=real.dtype)
    else:
        grad_norm = g.reshape(real.shape[0], -1).norm(dim=1)
    penalty = ((grad_norm - 1.0) ** 2).mean()
    return w_term + gp_lambda * penalty


def generator_adv_loss(critic, fake_batch) -> torch.Tensor:
    """-mean(critic(fake)): push generated patches toward 'real'."""
    return -critic(_as_batch(fake_batch)).mean()


def reference_for_stage(reference: FeatureGrid, stage: int, n_stages: int) -> FeatureGrid:
    """Reference raw grid average-pooled down to the stage-k resolution."""
    g = reference
    for _ in range(n_stages - 1 - stage):
        if min(g.resolution) % 2 != 0:
            raise ValueError(f"cannot halve resolution {g.resolution}")
        g = FeatureGrid(downsample2x_mean(g.data), g.aabb_min, g.aabb_max)
    return g


def _to_2d_batch(patch: torch.Tensor) -> torch.Tensor:
    return patch.permute(2, 0, 1).unsqueeze(0)


def _to_3d_batch(block: torch.Tensor) -> torch.Tensor:
    return block.permute(3, 0, 1, 2).unsqueeze(0)


def _rand_corner(rng: np.random.Generator, width: int, height: int, p: int) -> tuple:
    return (int(rng.integers(0, width - p + 1)), int(rng.integers(0, height - p + 1)))


def total_generator_loss(stack: GeneratorStack, reference: FeatureGrid, critics: CriticPair,
                         weights: LossWeights, pose_model: PoseModel, stage: int,
                         rng: np.random.Generator, cfg: GanConfig | None = None) -> torch.Tensor:
    """Full generator objective at one stage (see module docstring).

    `reference` must already be at the stage-k resolution.  Adversarial terms
    draw a fresh z and critic patches; reconstruction terms render/compare
    the fixed z*.  Each term uses an independent sub-stream derived from one
    rng draw, so the four terms decompose linearly in their weights.
    """
    cfg = stack.cfg if cfg is None else cfg
    expect = cfg.stage_resolution(stage)
    if reference.resolution != expect:
        raise ValueError(f"reference resolution {reference.resolution} != stage {stage} "
                         f"resolution {expect}")
    base = int(rng.integers(0, 2 ** 62))
    p2 = min(cfg.patch_2d, pose_model.width, pose_model.height)
    p3 = min(cfg.patch_3d, *expect)
    ref32 = FeatureGrid(reference.data.to(torch.float32), reference.aabb_min, reference.aabb_max)

    loss = torch.zeros((), dtype=torch.float32)
    fake = None
    if weights.gamma2d > 0 or weights.gamma3d > 0:
        z = sample_noise(stack.noise_spatial, derive_seed(base, "adv-z"))
        fake = stack.generate(z, stage, grad_stages_from=stage)
    if weights.gamma2d > 0:
        sub = np.random.default_rng(derive_seed(base, "adv-2d"))
        cam = sample_pose(pose_model, stage, sub)
        corner = _rand_corner(sub, cam.width, cam.height, p2)
        patch = render_patch_2d(fake, cam, cfg.render_config(derive_seed(base, "adv-2d-rays")),
                                corner, (p2, p2))
        loss = loss + weights.gamma2d * generator_adv_loss(critics.critic2d, _to_2d_batch(patch))
    if weights.gamma3d > 0:
        sub = np.random.default_rng(derive_seed(base, "adv-3d"))
        block = random_patch_3d(fake, p3, sub)
        loss = loss + weights.gamma3d * generator_adv_loss(critics.critic3d, _to_3d_batch(block))

    g_star = None
    if weights.rho2d > 0 or weights.rho3d > 0:
        g_star = stack.generate(None, stage, grad_stages_from=stage)
    if weights.rho2d > 0:
        sub = np.random.default_rng(derive_seed(base, "rec-2d"))
        cam = sample_pose(pose_model, stage, sub)
        corner = _rand_corner(sub, cam.width, cam.height, p2)
        rcfg = cfg.render_config(derive_seed(base, "rec-2d-rays"))
        p_gen = render_patch_2d(g_star, cam, rcfg, corner, (p2, p2))
        with torch.no_grad():
            p_ref = render_patch_2d(ref32, cam, rcfg, corner, (p2, p2))
        loss = loss + weights.rho2d * ((p_gen - p_ref) ** 2).mean()
    if weights.rho3d > 0:
        loss = loss + weights.rho3d * ((g_star.data - ref32.data) ** 2).mean()
    return loss


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train_stage(stack: GeneratorStack, critics: CriticPair, reference: FeatureGrid,
                pose_model: PoseModel, cfg: GanConfig | None, stage: int,
                rng: np.random.Generator, progress=None, log_every: int = 50):
    """Adversarial + reconstruction training of one stage.

    Per iteration: n_critic critic rounds (each updates the 2D critic on a
    real/fake rendered-patch pair and the 3D critic on raw sub-blocks, real
    patches always rendered from the reference grid), then one generator
    step on total_generator_loss.  Earlier stages must already be trained;
    their parameters are not touched (no optimizer, no grad).  Returns
    (stack, critics).
    """
    cfg = stack.cfg if cfg is None else cfg
    if not (0 <= stage < cfg.n_stages):
        raise ValueError(f"stage {stage} out of range")
    if not all(stack.trained[:stage]):
        raise ValueError(f"stages {[k for k in range(stage) if not stack.trained[k]]} "
                         "must be trained (and frozen) first")
    if len(pose_model.focal_schedule) < cfg.n_stages:
        raise ValueError("pose model focal schedule shorter than the stage count")
    if reference.resolution != cfg.stage_resolution(cfg.n_stages - 1):
        raise ValueError(f"reference {reference.resolution} != final stage resolution "
                         f"{cfg.stage_resolution(cfg.n_stages - 1)}")

    ref_k = reference_for_stage(reference, stage, cfg.n_stages)
    ref_k = FeatureGrid(ref_k.data.to(torch.float32), ref_k.aabb_min, ref_k.aabb_max)
    for k, net in enumerate(stack.stages):
        net.requires_grad_(k == stage)

    opt_g = torch.optim.Adam(stack.stages[stage].parameters(), lr=cfg.lr_generator,
                             betas=cfg.adam_betas)
    opt_c2 = torch.optim.Adam(critics.critic2d.parameters(), lr=cfg.lr_critic,
                              betas=cfg.adam_betas)
    opt_c3 = torch.optim.Adam(critics.critic3d.parameters(), lr=cfg.lr_critic,
                              betas=cfg.adam_betas)
    p2 = min(cfg.patch_2d, pose_model.width, pose_model.height)
    p3 = min(cfg.patch_3d, *ref_k.resolution)
    gp = cfg.weights.gp_lambda

    for it in range(cfg.iters_for(stage)):
        it_seed = int(rng.integers(0, 2 ** 62))
        c2_val = c3_val = float("nan")
        for c_step in range(cfg.n_critic):
            s = derive_seed(it_seed, f"critic-{c_step}")
            sub = np.random.default_rng(s)
            with torch.no_grad():
                z = sample_noise(stack.noise_spatial, derive_seed(s, "z"))
                fake_grid = stack.generate(z, stage)

                cam_f = sample_pose(pose_model, stage, sub)
                fake_p = render_patch_2d(fake_grid, cam_f,
                                         cfg.render_config(derive_seed(s, "fake-rays")),
                                         _rand_corner(sub, cam_f.width, cam_f.height, p2),
                                         (p2, p2))
                cam_r = sample_pose(pose_model, stage, sub)
                real_p = render_patch_2d(ref_k, cam_r,
                                         cfg.render_config(derive_seed(s, "real-rays")),
                                         _rand_corner(sub, cam_r.width, cam_r.height, p2),
                                         (p2, p2))
            loss_c2 = critic_loss_wgan(critics.critic2d, _to_2d_batch(real_p),
                                       _to_2d_batch(fake_p), gp, sub)
            opt_c2.zero_grad()
            loss_c2.backward()
            opt_c2.step()

            fake_b = random_patch_3d(fake_grid, p3, sub)
            real_b = random_patch_3d(ref_k, p3, sub)
            loss_c3 = critic_loss_wgan(critics.critic3d, _to_3d_batch(real_b),
                                       _to_3d_batch(fake_b), gp, sub)
            opt_c3.zero_grad()
            loss_c3.backward()
            opt_c3.step()
            c2_val, c3_val = float(loss_c2.detach()), float(loss_c3.detach())

        gen_rng = np.random.default_rng(derive_seed(it_seed, "generator"))
        loss_g = total_generator_loss(stack, ref_k, critics, cfg.weights, pose_model,
                                      stage, gen_rng, cfg)
        if not (torch.isfinite(loss_g) and np.isfinite(c2_val) and np.isfinite(c3_val)):
            raise RuntimeError(f"non-finite loss at stage {stage}, iteration {it} "
                               f"(generator={float(loss_g.detach())}, critic2d={c2_val}, "
                               f"critic3d={c3_val})")
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        if progress is not None and (it % log_every == 0 or it == cfg.iters_for(stage) - 1):
            progress({"stage": stage, "iteration": it,
                      "generator_loss": float(loss_g.detach()),
                      "critic2d_loss": c2_val, "critic3d_loss": c3_val})

    stack.trained[stage] = True
    return stack, critics


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _stage_blob(module: nn.Module) -> tuple:
    """(bytes of all params as float32 LE in state_dict order, name/shape list)."""
    names, chunks = [], []
    for name, tensor in module.state_dict().items():
        names.append([name, list(tensor.shape)])
        chunks.append(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(chunks), names


def stage_param_hash(stack: GeneratorStack, stage: int) -> str:
    """SHA-256 of the serialized stage parameters (freeze-contract probe)."""
    blob, _ = _stage_blob(stack.stages[stage])
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(stack: GeneratorStack, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages_meta = []
    for k, net in enumerate(stack.stages):
        blob, names = _stage_blob(net)
        fname = f"stage_{k}.bin"
        (out_dir / fname).write_bytes(blob)
        stages_meta.append({"file": fname, "params": names})
    z = stack.z_star
    (out_dir / "z_star.bin").write_bytes(z.values.numpy().astype("<f4").tobytes())
    manifest = {
        "format": CKPT_FORMAT,
        "master_seed": stack.master_seed,
        "config": asdict(stack.cfg),
        "trained": list(stack.trained),
        "stages": stages_meta,
        "z_star": {"file": "z_star.bin", "shape": list(z.values.shape), "seed": z.seed},
    }
    path = out_dir / "checkpoint.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def load_checkpoint(ckpt_dir) -> GeneratorStack:
    ckpt_dir = Path(ckpt_dir)
    path = ckpt_dir / "checkpoint.json"
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != CKPT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg = GanConfig.from_dict(manifest["config"])
    stack = GeneratorStack(cfg, manifest["master_seed"])
    for k, meta in enumerate(manifest["stages"]):
        raw = (ckpt_dir / meta["file"]).read_bytes()
        flat = np.frombuffer(raw, dtype="<f4")
        state, offset = {}, 0
        for name, shape in meta["params"]:
            size = int(np.prod(shape)) if shape else 1
            state[name] = torch.as_tensor(flat[offset:offset + size].copy()).reshape(shape)
            offset += size
        if offset != flat.size:
            raise ValueError(f"stage {k} blob size mismatch")
        stack.stages[k].load_state_dict(state)
    zmeta = manifest["z_star"]
    zraw = np.frombuffer((ckpt_dir / zmeta["file"]).read_bytes(), dtype="<f4")
    stack.z_star = NoiseGrid(torch.as_tensor(zraw.copy()).reshape(zmeta["shape"]),
                             seed=zmeta["seed"])
    stack.trained = [bool(t) for t in manifest["trained"]]
    return stack


def checkpoint_hash(ckpt_dir) -> str:
    """SHA-256 over the manifest and all parameter blobs (sorted by name)."""
    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / "checkpoint.json").is_file():
        raise FileNotFoundError(f"no checkpoint at {ckpt_dir}")
    h = hashlib.sha256()
    for p in sorted(ckpt_dir.glob("*.json")) + sorted(ckpt_dir.glob("*.bin")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def stack_hash(stack: GeneratorStack) -> str:
    """SHA-256 over all stage parameters of an in-memory stack."""
    h = hashlib.sha256()
    for k in range(len(stack.stages)):
        h.update(stage_param_hash(stack, k).encode())
    h.update(stack.z_star.values.numpy().astype("<f4").tobytes())
    return h.hexdigest()

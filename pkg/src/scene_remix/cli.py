"""Command-line pipeline driver.

Every command takes --out plus an optional --config JSON document; flags
override config values, defaults fill the rest, and the fully-resolved
config is written next to the outputs.  One master seed feeds a documented
splitter (seeding.derive_seed), so a run is reproducible byte-for-byte from
(config, seed).

Exit codes: 0 success, 2 usage/config errors, 3 numerical aborts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import metrics, reconstruction, remix_gan, renderer, scene_io
from .seeding import derive_seed

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


@dataclass
class SceneParams:
    kind: str = "boxes"
    count: int = 20
    resolution: int = 64
    views: int = 16
    image_size: int = 128


@dataclass
class PoseParams:
    radius_factor: float = 2.5
    elevation_deg: tuple = (15.0, 75.0)


@dataclass
class RenderParams:
    frames: int = 8
    image_size: int = 64
    focal: float | None = None  # None -> image_size
    samples_per_ray: int = 192
    elevation_deg: float = 30.0


_SECTIONS = {
    "scene": SceneParams,
    "recon": reconstruction.ReconConfig,
    "gan": remix_gan.GanConfig,
    "pose": PoseParams,
    "render": RenderParams,
    "metrics": metrics.MetricsConfig,
}
# JSON-facing keys per section; fields that cannot come from JSON are excluded
_SECTION_KEYS = {name: set(cls.__dataclass_fields__) for name, cls in _SECTIONS.items()}
_SECTION_KEYS["metrics"] -= {"extractor", "master_seed"}


def load_run_config(path) -> dict:
    """Parse and validate a run-config document; unknown keys are errors."""
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValueError("run config must be a JSON object")
    unknown = set(doc) - set(_SECTIONS) - {"master_seed"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    for name in _SECTIONS:
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ValueError(f"config section {name!r} must be an object")
        bad = set(section) - _SECTION_KEYS[name]
        if bad:
            raise ValueError(f"unknown keys in config section {name!r}: {sorted(bad)}")
    return doc


def _build(section: str, doc: dict, overrides: dict | None = None, **forced):
    data = dict(doc.get(section, {}))
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    data.update(forced)
    cls = _SECTIONS[section]
    if cls is remix_gan.GanConfig:
        return remix_gan.GanConfig.from_dict(data)
    return cls(**data)


def _master_seed(args, doc) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(doc.get("master_seed", 0))


def _write_resolved(out_dir: Path, command: str, master_seed: int, **sections):
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {"command": command, "master_seed": master_seed}
    for name, obj in sections.items():
        resolved[name] = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
    with open(out_dir / "resolved_config.json", "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)


def _exemplar_pose_model(reference, manifest_path, n_stages: int, pose: PoseParams):
    dataset = scene_io.load_dataset(manifest_path)
    cam = dataset.cameras[0]
    if cam.width != cam.height:
        raise ValueError("pose model requires square exemplar images")
    return renderer.PoseModel.for_grid(
        reference, image_size=cam.width, focal=cam.focal, n_stages=n_stages,
        radius_factor=pose.radius_factor, elevation_deg=tuple(pose.elevation_deg))


def _orbit_cameras(grid, params: RenderParams):
    center = 0.5 * (grid.aabb_min + grid.aabb_max)
    radius = 2.5 * 0.5 * grid.diagonal
    elev = math.radians(params.elevation_deg)
    focal = params.focal if params.focal is not None else float(params.image_size)
    cams = []
    for k in range(params.frames):
        az = 2.0 * math.pi * k / params.frames
        eye = center + radius * np.array([math.cos(elev) * math.cos(az),
                                          math.cos(elev) * math.sin(az),
                                          math.sin(elev)])
        cams.append(renderer.look_at(eye, center, focal, params.image_size,
                                     params.image_size))
    return cams


def _render_orbit(grid, out_dir: Path, params: RenderParams) -> list:
    from PIL import Image

    rcfg = renderer.RenderConfig(samples_per_ray=params.samples_per_ray,
                                 rng_policy="deterministic_midpoint")
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for k, cam in enumerate(_orbit_cameras(grid, params)):
        im = scene_io.as_image_array(renderer.render_image(grid, cam, rcfg))
        q = np.clip(np.round(np.clip(im, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
        path = out_dir / f"frame_{k:04d}.png"
        Image.fromarray(q).save(path)
        files.append(path.name)
    return files


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_make_scene(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    master = _master_seed(args, doc)
    params = _build("scene", doc, {"kind": args.kind, "count": args.count,
                                   "views": args.views, "resolution": args.resolution,
                                   "image_size": args.image_size})
    scene = scene_io.make_synthetic_scene(params.kind, params.count, params.resolution,
                                          derive_seed(master, "scene"))
    dataset = scene_io.render_dataset(scene, params.views, params.image_size,
                                      derive_seed(master, "views"))
    out = Path(args.out)
    manifest = scene_io.save_dataset(dataset, out)
    scene_io.write_grid(scene.ground_truth_grid, out / "ground_truth.rfg")
    _write_resolved(out, "make-scene", master, scene=params)
    print(f"wrote {len(dataset)} views to {manifest} (+ ground_truth.rfg)")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    master = _master_seed(args, doc)
    overrides = {"final_resolution": args.final_res, "start_divisor": args.divisor,
                 "rays_per_batch": args.rays, "batches_per_level": args.batches,
                 "learning_rate": args.lr}
    cfg = _build("recon", doc, overrides)
    dataset = scene_io.load_dataset(args.manifest)

    holdout = None
    train_set = dataset
    if args.holdout_every and len(dataset) > 1:
        train_set, holdout = reconstruction.split_holdout(dataset, args.holdout_every)

    records = []
    def progress(rec):
        records.append(rec)
        print(f"level {rec['level']} ({'x'.join(map(str, rec['resolution']))}) "
              f"batch {rec['batch']}: loss {rec['loss']:.6f}", file=sys.stderr)

    grid = reconstruction.reconstruct(train_set, cfg,
                                      np.random.default_rng(derive_seed(master, "reconstruction")),
                                      progress=progress, log_every=args.log_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene_io.write_grid(grid, out / "reference.rfg")

    levels = [list(r) for r in cfg.level_resolutions()]
    log = {"levels": levels, "records": records}
    if holdout is not None:
        rcfg = renderer.RenderConfig(samples_per_ray=256, background_rgb=cfg.background_rgb,
                                     density_scale=cfg.density_scale)
        vals = [reconstruction.psnr(renderer.render_image(grid, cam, rcfg), im)
                for im, cam in zip(holdout.images, holdout.cameras)]
        log["holdout_psnr_db"] = vals
        log["mean_holdout_psnr_db"] = float(np.mean(vals))
        print(f"held-out PSNR: {log['mean_holdout_psnr_db']:.2f} dB")
    with open(out / "train_log.json", "w") as f:
        json.dump(log, f, indent=2, sort_keys=True)
    _write_resolved(out, "reconstruct", master, recon=cfg)
    print(f"levels: {', '.join('x'.join(map(str, l)) for l in levels)}")
    print(f"wrote {out / 'reference.rfg'}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    master = _master_seed(args, doc)
    iters = None
    if args.iters:
        parts = [int(p) for p in str(args.iters).split(",")]
        iters = parts[0] if len(parts) == 1 else parts
    overrides = {"n_stages": args.stages, "width": args.width, "iters_per_stage": iters,
                 "n_critic": args.n_critic, "patch_2d": args.patch2d,
                 "patch_3d": args.patch3d, "samples_per_ray": args.samples}
    if args.noise_extent:
        overrides["noise_spatial"] = (args.noise_extent,) * 3
    cfg = _build("gan", doc, overrides)
    pose = _build("pose", doc)

    reference = scene_io.read_grid(args.reference)
    final = cfg.stage_resolution(cfg.n_stages - 1)
    if reference.resolution != final:
        raise ValueError(f"reference grid is {reference.resolution} but the GAN config "
                         f"tops out at {final}; adjust noise_spatial/n_stages")
    pose_model = _exemplar_pose_model(reference, args.manifest, cfg.n_stages, pose)

    out = Path(args.out)
    if (out / "checkpoint.json").is_file():
        stack = remix_gan.load_checkpoint(out)
        if asdict(stack.cfg) != asdict(cfg):
            raise ValueError("existing checkpoint config does not match the requested one")
        print(f"resuming: stages trained so far = {stack.trained}")
    else:
        stack = remix_gan.GeneratorStack(cfg, derive_seed(master, "gan"))

    records = []
    def progress(rec):
        records.append(rec)
        print(f"stage {rec['stage']} iter {rec['iteration']}: "
              f"G {rec['generator_loss']:.4f} D2 {rec['critic2d_loss']:.4f} "
              f"D3 {rec['critic3d_loss']:.4f}", file=sys.stderr)

    last = cfg.n_stages - 1 if args.stop_after_stage is None else int(args.stop_after_stage)
    for stage in range(cfg.n_stages):
        if stage > last:
            break
        if stack.trained[stage]:
            continue
        critics = remix_gan.make_critics(cfg, derive_seed(master, f"critics-{stage}"))
        remix_gan.train_stage(stack, critics, reference, pose_model, cfg, stage,
                              np.random.default_rng(derive_seed(master, f"train-stage-{stage}")),
                              progress=progress, log_every=args.log_every)
        remix_gan.save_checkpoint(stack, out)
        print(f"stage {stage} done; checkpoint saved")

    log_path = out / "train_log.json"
    existing = []
    if log_path.is_file():
        with open(log_path) as f:
            existing = json.load(f).get("records", [])
    with open(log_path, "w") as f:
        json.dump({"records": existing + records}, f, indent=2, sort_keys=True)
    _write_resolved(out, "train", master, gan=cfg, pose=pose)
    return EXIT_OK


def _parse_retarget(text: str) -> tuple:
    try:
        mult = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"bad retarget spec {text!r}; expected e.g. 2x1x1")
    if len(mult) != 3 or min(mult) < 1:
        raise ValueError(f"bad retarget spec {text!r}; expected three positive ints")
    return mult


def cmd_sample(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    master = _master_seed(args, doc)
    params = _build("render", doc, {"frames": args.frames, "image_size": args.image_size,
                                    "focal": args.focal, "samples_per_ray": args.samples,
                                    "elevation_deg": args.elevation})
    stack = remix_gan.load_checkpoint(args.checkpoint)

    shape = stack.noise_spatial
    if args.retarget:
        mult = _parse_retarget(args.retarget)
        shape = tuple(s * m for s, m in zip(shape, mult))
    z = remix_gan.sample_noise(shape, derive_seed(master, "sample-z"))
    grid = stack.generate(z)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid_path = scene_io.write_grid(grid, out / "sample.rfg")
    grid_hash = hashlib.sha256(grid_path.read_bytes()).hexdigest()
    # every turntable frame below is a view of this one grid; the hash is
    # logged exactly once so view consistency is auditable
    with open(out / "grid_hash.json", "w") as f:
        json.dump({"grid_sha256": grid_hash, "noise_shape": list(shape)}, f,
                  indent=2, sort_keys=True)
    files = _render_orbit(grid, out, params)
    _write_resolved(out, "sample", master, render=params,
                    noise_shape=list(shape), retarget=args.retarget)
    print(f"grid sha256 {grid_hash}")
    print(f"wrote {len(files)} turntable frames to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    master = _master_seed(args, doc)
    params = _build("render", doc, {"frames": args.frames, "image_size": args.image_size,
                                    "focal": args.focal, "samples_per_ray": args.samples,
                                    "elevation_deg": args.elevation})
    grid = scene_io.read_grid(args.grid)
    out = Path(args.out)
    files = _render_orbit(grid, out, params)
    _write_resolved(out, "render", master, render=params)
    print(f"wrote {len(files)} frames to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    master = _master_seed(args, doc)
    overrides = {"n_views": args.views, "n_seeds": args.seeds}
    if args.allow_untrained:
        overrides["allow_untrained"] = True
    mcfg = _build("metrics", doc, overrides, master_seed=master)
    pose = _build("pose", doc)

    stack = remix_gan.load_checkpoint(args.checkpoint)
    reference = scene_io.read_grid(args.reference)
    pose_model = _exemplar_pose_model(reference, args.manifest, stack.cfg.n_stages, pose)
    report = metrics.evaluate_report(reference, stack, pose_model, mcfg,
                                     checkpoint_dir=args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    _write_resolved(out, "evaluate", master, metrics=mcfg)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="run-config JSON (unknown keys rejected)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")


def _add_orbit_args(p):
    p.add_argument("--frames", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--focal", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--elevation", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scene-remix",
                                     description="single-scene 3D remix pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", help="generate a synthetic exemplar dataset")
    _add_common(p)
    p.add_argument("--kind", choices=["boxes", "spheres", "mixed"])
    p.add_argument("--count", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("reconstruct", help="fit the reference grid to posed images")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--final-res", type=int, dest="final_res")
    p.add_argument("--divisor", type=int)
    p.add_argument("--rays", type=int)
    p.add_argument("--batches", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--holdout-every", type=int, default=8,
                   help="hold out every Nth view for PSNR (0 disables)")
    p.add_argument("--log-every", type=int, default=200)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="progressive GAN training on a reference grid")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="exemplar dataset (intrinsics)")
    p.add_argument("--reference", required=True, help="reference RFG1 grid")
    p.add_argument("--stages", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--iters", help="iterations per stage: int or comma list")
    p.add_argument("--n-critic", type=int, dest="n_critic")
    p.add_argument("--noise-extent", type=int, dest="noise_extent")
    p.add_argument("--patch2d", type=int)
    p.add_argument("--patch3d", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--stop-after-stage", type=int, dest="stop_after_stage",
                   help="train up to this stage then exit (resume later)")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    for name, need_retarget in (("sample", False), ("retarget", True)):
        p = sub.add_parser(name, help="generate a grid and render a turntable")
        _add_common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--retarget", required=need_retarget,
                       help="noise-extent multipliers, e.g. 2x1x1")
        _add_orbit_args(p)
        p.set_defaults(func=cmd_sample)

    p = sub.add_parser("render", help="render turntable frames of an RFG1 grid")
    _add_common(p)
    p.add_argument("--grid", required=True)
    _add_orbit_args(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="visual quality + diversity report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--views", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--allow-untrained", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (reconstruction.DivergenceError,) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError,
            scene_io.ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

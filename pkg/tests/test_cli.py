"""End-to-end CLI pipeline at miniature scale, plus exit-code contracts."""

import hashlib
import json

import numpy as np
import pytest

from scene_remix import cli
from scene_remix.reconstruction import DivergenceError
from scene_remix.remix_gan import checkpoint_hash
from scene_remix.scene_io import load_dataset, read_grid

_GAN_SECTION = {"n_stages": 2, "width": 4, "layers_per_stage": 3,
                "noise_spatial": [2, 2, 2], "iters_per_stage": 2, "n_critic": 1,
                "patch_2d": 4, "patch_3d": 2, "samples_per_ray": 8}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    rc = cli.main(["make-scene", "--out", str(out), "--seed", "5", "--kind", "boxes",
                   "--count", "2", "--resolution", "16", "--views", "3",
                   "--image-size", "16"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def recon_dir(tmp_path_factory, scene_dir):
    out = tmp_path_factory.mktemp("recon")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"recon": {"samples_per_ray": 8}}))
    rc = cli.main(["reconstruct", "--out", str(out), "--seed", "5",
                   "--manifest", str(scene_dir / "manifest.json"),
                   "--config", str(cfg), "--final-res", "8", "--divisor", "4",
                   "--rays", "128", "--batches", "10", "--log-every", "5"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, scene_dir, recon_dir):
    out = tmp_path_factory.mktemp("train")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"gan": _GAN_SECTION}))
    rc = cli.main(["train", "--out", str(out), "--seed", "5",
                   "--manifest", str(scene_dir / "manifest.json"),
                   "--reference", str(recon_dir / "reference.rfg"),
                   "--config", str(cfg)])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# make-scene
# ---------------------------------------------------------------------------

def test_make_scene_outputs(scene_dir):
    ds = load_dataset(scene_dir / "manifest.json")
    assert len(ds) == 3
    assert ds.image_shape == (16, 16)
    gt = read_grid(scene_dir / "ground_truth.rfg")
    assert gt.resolution == (16, 16, 16)
    resolved = json.loads((scene_dir / "resolved_config.json").read_text())
    assert resolved["command"] == "make-scene"
    assert resolved["master_seed"] == 5
    assert resolved["scene"]["count"] == 2


def test_make_scene_deterministic(tmp_path, scene_dir):
    rc = cli.main(["make-scene", "--out", str(tmp_path), "--seed", "5", "--kind",
                   "boxes", "--count", "2", "--resolution", "16", "--views", "3",
                   "--image-size", "16"])
    assert rc == 0
    assert (tmp_path / "ground_truth.rfg").read_bytes() == \
        (scene_dir / "ground_truth.rfg").read_bytes()


def test_make_scene_rejects_bad_kind(tmp_path):
    assert cli.main(["make-scene", "--out", str(tmp_path), "--kind", "torus"]) == 2


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------

def test_reconstruct_outputs(recon_dir):
    grid = read_grid(recon_dir / "reference.rfg")
    assert grid.resolution == (8, 8, 8)
    log = json.loads((recon_dir / "train_log.json").read_text())
    assert log["levels"] == [[2, 2, 2], [4, 4, 4], [8, 8, 8]]
    assert len(log["records"]) > 0
    assert len(log["holdout_psnr_db"]) == 1  # 3 views, every 8th held out
    assert np.isfinite(log["mean_holdout_psnr_db"])
    resolved = json.loads((recon_dir / "resolved_config.json").read_text())
    assert resolved["recon"]["samples_per_ray"] == 8  # config file applied
    assert resolved["recon"]["batches_per_level"] == 10  # flag override applied


def test_reconstruct_missing_manifest(tmp_path):
    rc = cli.main(["reconstruct", "--out", str(tmp_path),
                   "--manifest", str(tmp_path / "nope.json")])
    assert rc == 2


def test_config_validation_errors(tmp_path, scene_dir):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"reconz": {}}))
    rc = cli.main(["reconstruct", "--out", str(tmp_path), "--config", str(bad),
                   "--manifest", str(scene_dir / "manifest.json")])
    assert rc == 2

    bad.write_text(json.dumps({"recon": {"learning_rte": 0.1}}))
    rc = cli.main(["reconstruct", "--out", str(tmp_path), "--config", str(bad),
                   "--manifest", str(scene_dir / "manifest.json")])
    assert rc == 2

    bad.write_text("{not json")
    rc = cli.main(["reconstruct", "--out", str(tmp_path), "--config", str(bad),
                   "--manifest", str(scene_dir / "manifest.json")])
    assert rc == 2


def test_divergence_maps_to_exit_3(tmp_path, scene_dir, monkeypatch):
    def boom(*a, **kw):
        raise DivergenceError("non-finite loss at level 0 ((2, 2, 2)), batch 3")
    monkeypatch.setattr("scene_remix.reconstruction.reconstruct", boom)
    rc = cli.main(["reconstruct", "--out", str(tmp_path),
                   "--manifest", str(scene_dir / "manifest.json"),
                   "--final-res", "8", "--divisor", "4", "--batches", "2"])
    assert rc == 3


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_outputs(train_dir):
    manifest = json.loads((train_dir / "checkpoint.json").read_text())
    assert manifest["format"] == "3ingan-ckpt-v1"
    assert manifest["trained"] == [True, True]
    assert (train_dir / "stage_0.bin").is_file()
    assert (train_dir / "stage_1.bin").is_file()
    assert (train_dir / "z_star.bin").is_file()
    log = json.loads((train_dir / "train_log.json").read_text())
    stages = {r["stage"] for r in log["records"]}
    assert stages == {0, 1}


def test_train_resume_noop_when_complete(train_dir, scene_dir, recon_dir, capsys):
    cfg = train_dir / "cfg.json"
    before = checkpoint_hash(train_dir)
    rc = cli.main(["train", "--out", str(train_dir), "--seed", "5",
                   "--manifest", str(scene_dir / "manifest.json"),
                   "--reference", str(recon_dir / "reference.rfg"),
                   "--config", str(cfg)])
    assert rc == 0
    assert "resuming" in capsys.readouterr().out
    manifest = json.loads((train_dir / "checkpoint.json").read_text())
    assert manifest["trained"] == [True, True]
    # parameter blobs untouched by the no-op resume
    assert checkpoint_hash(train_dir) == before


def test_train_resume_rejects_config_mismatch(train_dir, scene_dir, recon_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gan": {**_GAN_SECTION, "width": 8}}))
    rc = cli.main(["train", "--out", str(train_dir), "--seed", "5",
                   "--manifest", str(scene_dir / "manifest.json"),
                   "--reference", str(recon_dir / "reference.rfg"),
                   "--config", str(cfg)])
    assert rc == 2


def test_train_rejects_resolution_mismatch(tmp_path, scene_dir, recon_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gan": {**_GAN_SECTION, "n_stages": 1}}))  # tops at 4^3
    rc = cli.main(["train", "--out", str(tmp_path), "--seed", "5",
                   "--manifest", str(scene_dir / "manifest.json"),
                   "--reference", str(recon_dir / "reference.rfg"),
                   "--config", str(cfg)])
    assert rc == 2


def test_train_stop_after_stage_then_resume(tmp_path, scene_dir, recon_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gan": _GAN_SECTION}))
    common = ["--seed", "5", "--manifest", str(scene_dir / "manifest.json"),
              "--reference", str(recon_dir / "reference.rfg"), "--config", str(cfg)]
    rc = cli.main(["train", "--out", str(tmp_path)] + common + ["--stop-after-stage", "0"])
    assert rc == 0
    manifest = json.loads((tmp_path / "checkpoint.json").read_text())
    assert manifest["trained"] == [True, False]

    rc = cli.main(["train", "--out", str(tmp_path)] + common)
    assert rc == 0
    manifest = json.loads((tmp_path / "checkpoint.json").read_text())
    assert manifest["trained"] == [True, True]


def test_train_runtime_error_maps_to_exit_3(tmp_path, scene_dir, recon_dir, monkeypatch):
    def boom(*a, **kw):
        raise RuntimeError("non-finite loss at stage 0, iteration 1")
    monkeypatch.setattr("scene_remix.remix_gan.train_stage", boom)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gan": _GAN_SECTION}))
    rc = cli.main(["train", "--out", str(tmp_path), "--seed", "5",
                   "--manifest", str(scene_dir / "manifest.json"),
                   "--reference", str(recon_dir / "reference.rfg"),
                   "--config", str(cfg)])
    assert rc == 3


# ---------------------------------------------------------------------------
# sample / retarget / render
# ---------------------------------------------------------------------------

def test_sample_outputs_and_grid_hash(train_dir, tmp_path):
    rc = cli.main(["sample", "--out", str(tmp_path), "--seed", "9",
                   "--checkpoint", str(train_dir), "--frames", "2",
                   "--image-size", "8", "--samples", "4"])
    assert rc == 0
    rec = json.loads((tmp_path / "grid_hash.json").read_text())
    actual = hashlib.sha256((tmp_path / "sample.rfg").read_bytes()).hexdigest()
    assert rec["grid_sha256"] == actual
    assert rec["noise_shape"] == [2, 2, 2]
    assert (tmp_path / "frame_0000.png").is_file()
    assert (tmp_path / "frame_0001.png").is_file()
    assert read_grid(tmp_path / "sample.rfg").resolution == (8, 8, 8)


def test_sample_is_seed_deterministic(train_dir, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main(["sample", "--out", str(out), "--seed", "9",
                       "--checkpoint", str(train_dir), "--frames", "1",
                       "--image-size", "8", "--samples", "4"])
        assert rc == 0
        outs.append(json.loads((out / "grid_hash.json").read_text())["grid_sha256"])
    assert outs[0] == outs[1]


def test_retarget_doubles_noise_and_grid(train_dir, tmp_path):
    rc = cli.main(["retarget", "--out", str(tmp_path), "--seed", "9",
                   "--checkpoint", str(train_dir), "--retarget", "2x1x1",
                   "--frames", "1", "--image-size", "8", "--samples", "4"])
    assert rc == 0
    rec = json.loads((tmp_path / "grid_hash.json").read_text())
    assert rec["noise_shape"] == [4, 2, 2]
    assert read_grid(tmp_path / "sample.rfg").resolution == (16, 8, 8)


def test_retarget_flag_is_required(train_dir, tmp_path):
    rc = cli.main(["retarget", "--out", str(tmp_path), "--checkpoint", str(train_dir)])
    assert rc == 2


def test_retarget_bad_spec(train_dir, tmp_path):
    rc = cli.main(["retarget", "--out", str(tmp_path), "--checkpoint", str(train_dir),
                   "--retarget", "2xx"])
    assert rc == 2


def test_render_grid_frames(scene_dir, tmp_path):
    rc = cli.main(["render", "--out", str(tmp_path), "--grid",
                   str(scene_dir / "ground_truth.rfg"), "--frames", "2",
                   "--image-size", "8", "--samples", "4"])
    assert rc == 0
    assert (tmp_path / "frame_0001.png").is_file()


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_report(train_dir, scene_dir, recon_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"metrics": {"samples_per_ray": 8}}))
    rc = cli.main(["evaluate", "--out", str(tmp_path), "--seed", "5",
                   "--checkpoint", str(train_dir),
                   "--reference", str(recon_dir / "reference.rfg"),
                   "--manifest", str(scene_dir / "manifest.json"),
                   "--config", str(cfg), "--views", "2", "--seeds", "2"])
    assert rc == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["checkpoint_hash"] == checkpoint_hash(train_dir)
    assert report["n_views"] == 2 and report["n_seeds"] == 2
    assert np.isfinite(report["visual_quality"])
    assert report["scene_diversity"] >= 0.0


# ---------------------------------------------------------------------------
# parser-level behavior
# ---------------------------------------------------------------------------

def test_no_command_is_usage_error():
    assert cli.main([]) == 2


def test_help_exits_zero():
    assert cli.main(["--help"]) == 0

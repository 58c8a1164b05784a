import hashlib
import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import local_maxima
from rdfield import cli
from rdfield import io as rio
from rdfield.field import save_checkpoint
from rdfield.renderer import RadarConfig
from rdfield.synth import bake_scene, general_scene, point_targets_scene, scale_spec, tent_scene
from rdfield.train import render_frames, restore_state

SIM = """
frames = 20
resolution = 24
radar_n_range = 32
radar_n_doppler = 40   # +-2 m/s, beyond the 1 m/s platform speed
radar_n_antenna = 8
radar_range_resolution = 0.2
radar_doppler_resolution = 0.1
radar_circle_samples = 16
radar_sampler = linear
camera_width = 16
camera_height = 12
"""
FIT = """
stage1_iters = 4
stage2_iters = 6
camera_rays = 64
radar_frames = 2
bce_points = 64
normal_grad_rays = 16
stage2_camera_rays = 16
resolutions = 8, 16
sh_levels = 2
log_every = 1
"""


def _digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "sim.cfg").write_text(SIM)
    (root / "fit.cfg").write_text(FIT)
    assert _run("--config", root / "sim.cfg", "--seed", 4, "simulate", "--scene", "general", "--out", root / "ds") == 0
    assert _run("--config", root / "fit.cfg", "fit", "--manifest", root / "ds", "--out", root / "model.ckpt",
                "--scale", 1.0) == 0
    return root


# --------------------------------------------------------------------------
# simulate


def test_simulate_writes_valid_manifest(work):
    m = rio.Manifest.load(work / "ds")
    m.validate()
    assert len(m.frames) == 20 and m.radar["n_doppler"] == 40
    assert json.loads((work / "ds" / "answers.json").read_text())["true_scale"] == 1.0


def test_simulate_rerun_identical(work, tmp_path):
    assert _run("--config", work / "sim.cfg", "--seed", 4, "simulate", "--scene", "general", "--out", tmp_path) == 0
    assert _digest(tmp_path) == _digest(work / "ds")


def test_simulate_env_override(work, tmp_path, monkeypatch):
    monkeypatch.setenv("RDFIELD_FRAMES", "12")
    assert _run("--config", work / "sim.cfg", "simulate", "--out", tmp_path) == 0
    assert len(rio.Manifest.load(tmp_path).frames) == 12


def test_simulate_input_errors(work, tmp_path, capsys):
    bad_scene = tmp_path / "scene.json"
    bad_scene.write_text(json.dumps({"primitives": [{"shape": "cone"}]}))
    assert _run("simulate", "--scene", bad_scene, "--out", tmp_path / "a") == 2
    bad_traj = tmp_path / "traj.json"
    bad_traj.write_text(json.dumps({"kind": "spiral"}))
    assert _run("simulate", "--trajectory", bad_traj, "--out", tmp_path / "b") == 2
    assert _run("simulate", "--scene", tmp_path / "missing.json", "--out", tmp_path / "c") == 2
    (tmp_path / "cfg").write_text("radar_n_range = 0\n")
    assert _run("--config", tmp_path / "cfg", "simulate", "--out", tmp_path / "d") == 2
    assert "error:" in capsys.readouterr().err


def test_simulate_unwritable_output(work, tmp_path):
    # a regular file as parent directory cannot be written to, whatever the user's privileges
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert _run("--config", work / "sim.cfg", "simulate", "--out", blocker / "ds") == 2


def test_simulate_scene_from_json(work, tmp_path):
    spec = {"primitives": [{"shape": "sphere", "center": [0, 0, 1], "size": [0.5],
                            "material": {"camera_alpha": 1.0, "radar_alpha": 0.5}}]}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert _run("--config", work / "sim.cfg", "simulate", "--scene", tmp_path / "s.json", "--frames", 10,
                "--out", tmp_path / "ds") == 0
    rio.Manifest.load(tmp_path / "ds").validate()


# --------------------------------------------------------------------------
# fit / eval


def test_fit_writes_checkpoint_and_log(work):
    recs = [json.loads(x) for x in Path(str(work / "model.ckpt") + ".log.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in recs] == [1] * 4 + [2] * 6
    assert all(math.isfinite(r["loss"]) for r in recs)


def test_fit_missing_manifest(tmp_path):
    assert _run("fit", "--manifest", tmp_path / "none", "--out", tmp_path / "m.ckpt") == 2


def test_fit_divergence_exit_code(work, tmp_path):
    (tmp_path / "nan.cfg").write_text(FIT + "camera_lr = nan\ncamera_lr_final = nan\n")
    assert _run("--config", tmp_path / "nan.cfg", "fit", "--manifest", work / "ds", "--out", tmp_path / "m.ckpt",
                "--scale", 1.0) == 3


def test_resume_continues_identically(work, tmp_path, monkeypatch):
    saved = cli.save_state

    def save_and_keep(path, state, config, extra=None):
        saved(path, state, config, extra)
        if state.stage == 2 and state.step == 3:
            shutil.copy(path, tmp_path / "step3.ckpt")

    monkeypatch.setattr(cli, "save_state", save_and_keep)
    assert _run("--config", work / "fit.cfg", "fit", "--manifest", work / "ds", "--out", tmp_path / "full.ckpt",
                "--scale", 1.0, "--checkpoint-every", 3) == 0
    monkeypatch.setattr(cli, "save_state", saved)
    assert _run("--config", work / "fit.cfg", "fit", "--manifest", work / "ds", "--out", tmp_path / "res.ckpt",
                "--resume", tmp_path / "step3.ckpt") == 0
    full = [json.loads(x) for x in (tmp_path / "full.ckpt.log.jsonl").read_text().splitlines()]
    resumed = [json.loads(x) for x in (tmp_path / "res.ckpt.log.jsonl").read_text().splitlines()]
    assert resumed == full[-3:]
    assert (tmp_path / "res.ckpt").read_bytes() == (tmp_path / "full.ckpt").read_bytes()


def test_fit_is_idempotent(work, tmp_path):
    assert _run("--config", work / "fit.cfg", "fit", "--manifest", work / "ds", "--out", tmp_path / "again.ckpt",
                "--scale", 1.0) == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (work / "model.ckpt").read_bytes()


def test_eval_against_own_render_is_perfect(work, tmp_path):
    ds, _ = rio.read_dataset(work / "ds")
    state, _ = restore_state(work / "model.ckpt", ds)
    preds = render_frames(state, list(range(len(ds.frames))))
    copy = tmp_path / "self"
    shutil.copytree(work / "ds", copy)
    m = rio.Manifest.load(copy)
    for rel, f, p in zip(m.frames, ds.frames, preds):
        rio.write_frame(m.path(rel), rio.RangeDopplerFrame(f.timestamp, p), ds.radar)
    assert _run("eval", "--manifest", copy, "--checkpoint", work / "model.ckpt", "--out", tmp_path / "r.json",
                "--split", "all") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["mean_ssim"] == pytest.approx(1.0, abs=1e-9)
    assert math.isinf(rep["mean_psnr"])


def test_eval_report_and_strips(work, tmp_path):
    assert _run("eval", "--manifest", work / "ds", "--checkpoint", work / "model.ckpt", "--out",
                tmp_path / "r.json", "--strips", tmp_path / "strips", "--n-strips", 2) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["frames"] == list(range(16, 20))
    assert 0 <= rep["mean_ssim"] <= 1 or math.isnan(rep["mean_ssim"])
    strips = sorted((tmp_path / "strips").glob("*.png"))
    assert len(strips) == 2
    img, meta = rio.read_heatmap(strips[0])
    assert img.shape == (2 * 32, 8 * 40) and meta["vmin"] == 0.0 and meta["vmax"] == 1.0


def test_eval_split_mismatch(work, tmp_path):
    assert _run("--config", work / "sim.cfg", "--seed", 4, "simulate", "--frames", 12, "--out", tmp_path / "ds") == 0
    assert _run("eval", "--manifest", tmp_path / "ds", "--checkpoint", work / "model.ckpt", "--out",
                tmp_path / "r.json") == 2


def test_antenna_subset_fit_and_per_antenna_report(work, tmp_path):
    assert _run("--config", work / "fit.cfg", "fit", "--manifest", work / "ds", "--out", tmp_path / "sub.ckpt",
                "--scale", 1.0, "--antennas", "0-3") == 0
    assert _run("eval", "--manifest", work / "ds", "--checkpoint", tmp_path / "sub.ckpt", "--out",
                tmp_path / "r.json", "--split", "all") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["trained_antennas"] == [0, 1, 2, 3]
    assert sorted(int(k) for k in rep["per_antenna_psnr"]) == list(range(8))


# --------------------------------------------------------------------------
# superresolve / occupancy-slice


@pytest.fixture(scope="module")
def targets_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("targets") / "targets.ckpt"
    radar = RadarConfig(n_range=48, n_doppler=8, n_antenna=8, range_resolution=0.1, samples_per_bin=4,
                        sampler="linear", azimuth_fov=40.0)
    save_checkpoint(path, bake_scene(point_targets_scene(), 96, radar).field, None, {"radar": radar.to_dict()})
    return path


def test_superresolve_separates_targets(targets_ckpt, tmp_path):
    for n in (128, 8):
        assert _run("superresolve", "--checkpoint", targets_ckpt, "--pose", "0,0,0", "--n-azimuth", n,
                    "--rays", 512, "--out", tmp_path / str(n)) == 0
    fine, meta = rio.read_heatmap(tmp_path / "128" / "range_azimuth_000.png")
    coarse, _ = rio.read_heatmap(tmp_path / "8" / "range_azimuth_000.png")
    assert fine.shape == (48, 128) and coarse.shape == (48, 8)
    assert meta["axes"]["cols"]["step"] == pytest.approx(40.0 / 128)
    assert local_maxima(fine[np.argmax(fine.max(1))]) == 2
    assert local_maxima(coarse[np.argmax(coarse.max(1))]) == 1
    # both reflectors sit 3 m out
    assert abs((np.argmax(fine.max(1)) + 0.5) * 0.1 - 3.0) <= 0.15


def test_superresolve_input_errors(targets_ckpt, tmp_path):
    assert _run("superresolve", "--checkpoint", targets_ckpt, "--pose", "0,0,0", "--n-azimuth", 0,
                "--out", tmp_path) == 2
    assert _run("superresolve", "--checkpoint", targets_ckpt, "--out", tmp_path) == 2
    assert _run("superresolve", "--checkpoint", targets_ckpt, "--pose", "1,2", "--out", tmp_path) == 2
    assert _run("superresolve", "--checkpoint", tmp_path / "none.ckpt", "--pose", "0,0,0", "--out", tmp_path) == 2


def test_occupancy_slice_values_in_unit_interval(work, tmp_path):
    for field in ("camera", "radar"):
        assert _run("occupancy-slice", "--checkpoint", work / "model.ckpt", "--height", 0.5, "--field", field,
                    "--resolution", 32, "--out", tmp_path / f"{field}.png") == 0
        sl, meta = rio.read_heatmap(tmp_path / f"{field}.png")
        assert sl.shape == (32, 32) and sl.min() >= 0 and sl.max() <= 1
        assert meta["axes"]["height"] == 0.5
    assert _run("occupancy-slice", "--checkpoint", work / "model.ckpt", "--height", 7.0,
                "--out", tmp_path / "x.png") == 2


def test_tent_slices_and_depth_maps(tmp_path):
    ckpt = tmp_path / "tent.ckpt"
    save_checkpoint(ckpt, bake_scene(tent_scene(), 64).field)
    assert _run("occupancy-slice", "--checkpoint", ckpt, "--height", 2.9, "--resolution", 32,
                "--out", tmp_path / "empty.png") == 0
    assert np.all(rio.read_heatmap(tmp_path / "empty.png")[0] == 0)
    view = "3.5,0,0.6,180"
    for field in ("camera", "radar"):
        assert _run("occupancy-slice", "--checkpoint", ckpt, "--height", 0.6, "--field", field, "--view", view,
                    "--out", tmp_path / f"{field}.png") == 0
    cam = rio.read_heatmap(tmp_path / "camera_depth_000.png")[0]
    rad = rio.read_heatmap(tmp_path / "radar_depth_000.png")[0]
    h, w = cam.shape
    # camera stops at the cloth (0.65..0.95 m from the axis), radar reaches the target face (0.22 m)
    assert 3.5 - 1.0 < cam[h // 2, w // 2] < 3.5 - 0.6
    assert rad[h // 2, w // 2] > 3.5 - 0.45
    sl_c = rio.read_heatmap(tmp_path / "camera.png")[0]
    sl_r = rio.read_heatmap(tmp_path / "radar.png")[0]
    assert sl_c.max() > 0.8 and sl_r.max() > 0.8  # cloth in the camera slice, target in the radar slice


# --------------------------------------------------------------------------
# calibrate-scale / fit-noise


def test_calibrate_scale(work, tmp_path):
    assert _run("--config", work / "sim.cfg", "--seed", 2, "simulate", "--scale", 0.5,
                "--out", tmp_path / "ds") == 0
    ds, _ = rio.read_dataset(tmp_path / "ds")
    radar = ds.radar
    field = bake_scene(scale_spec(general_scene(0), 2.0), 24, radar).field  # camera field in the scaleless frame
    save_checkpoint(tmp_path / "cam.ckpt", field)
    assert _run("calibrate-scale", "--manifest", tmp_path / "ds", "--checkpoint", tmp_path / "cam.ckpt",
                "--out", tmp_path / "scale.json") == 0
    rep = json.loads((tmp_path / "scale.json").read_text())
    assert set(rep) == {"s_init", "s_opt", "objective_curve"}
    assert abs(rep["s_opt"] - 0.5) / 0.5 <= 0.05
    assert len(rep["objective_curve"]) >= 33
    assert (tmp_path / "scale.png").stat().st_size > 0


def test_fit_noise(work, tmp_path):
    assert _run("fit-noise", "--manifest", work / "ds", "--scale", 1.0, "--out", tmp_path / "n.json") == 0
    nm = json.loads((tmp_path / "n.json").read_text())
    assert abs(nm["dof"] - 4.0) <= 0.4
    assert _run("fit-noise", "--manifest", work / "ds", "--checkpoint", work / "model.ckpt",
                "--out", tmp_path / "m.json") == 0
    assert json.loads((tmp_path / "m.json").read_text()) == nm

"""Command-line entry point: ``rdfield <command> [options]``.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io as rio
from .calibration import FailedCalibration, ScaleParam, optimize_scale
from .geometry import Pose, load_trajectory, quat_from_axis_angle
from .losses import LossWeights
from .metrics import NoiseFitError, NoiseModel, clip_bounds, fit_noise
from .renderer import CameraIntrinsics, RadarConfig, camera_rays_for_pose, render_camera_rays, render_range_azimuth
from .synth import (Material, Primitive, SceneSpec, TrajectorySpec, general_scene, generate_dataset,
                    point_targets_scene, retro_plates_scene, tent_scene)
from .train import (NumericalDivergence, TrainConfig, begin_stage2, desk_weights, evaluate, init_state, render_frames,
                    restore_state, run_stage, save_state, stage1_optimizer)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
PRESETS = {"general": general_scene, "plates": retro_plates_scene, "tent": tent_scene, "targets": point_targets_scene}

log = logging.getLogger("rdfield")


@dataclasses.dataclass
class SimulateConfig:
    scene: str = "general"
    frames: int = 300
    true_scale: float = 1.0
    noise_level: float = 2e-4
    noise_dof: float = 4.0
    resolution: int = 64


# --------------------------------------------------------------------------
# configuration plumbing


def _all_keys() -> list[str]:
    keys = [f.name for f in dataclasses.fields(TrainConfig)]
    keys += ["lambda_" + f.name for f in dataclasses.fields(LossWeights)]
    keys += ["radar_" + f.name for f in dataclasses.fields(RadarConfig)]
    keys += ["camera_" + f.name for f in dataclasses.fields(CameraIntrinsics)]
    keys += [f.name for f in dataclasses.fields(SimulateConfig)]
    return keys


def load_settings(args) -> dict[str, str]:
    """Config file values, then RDFIELD_* environment overrides, then --seed."""
    values = rio.read_config(args.config)
    values.update(rio.env_overrides(_all_keys()))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return values


def train_config(values: dict, antennas=None) -> TrainConfig:
    cfg = rio.apply_overrides(TrainConfig(), values)
    if antennas is not None:
        cfg = dataclasses.replace(cfg, antennas=antennas)
    return cfg


def loss_weights(values: dict) -> LossWeights:
    return rio.apply_overrides(desk_weights(), values, prefix="lambda_")


def _write_json(path: str | Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# spec files


def scene_from_dict(d: dict) -> SceneSpec:
    prims = []
    for p in d.get("primitives", []):
        p = dict(p)
        mat = Material(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.pop("material", {}).items()})
        prims.append(Primitive(material=mat, **{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}))
    kw = {}
    if "bounds" in d:
        kw["bounds"] = tuple(tuple(float(x) for x in b) for b in d["bounds"])
    if "retro_weight" in d:
        kw["retro_weight"] = float(d["retro_weight"])
    return SceneSpec(tuple(prims), **kw)


def load_scene(name: str) -> SceneSpec:
    if name in PRESETS:
        return PRESETS[name]()
    try:
        with open(name) as fh:
            return scene_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, TypeError, KeyError, ValueError) as e:
        raise rio.InputError(f"invalid scene spec {name!r}: {e}") from e


def load_trajectory_spec(path: str | None, n_frames: int, seed: int) -> TrajectorySpec:
    d = {}
    if path:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise rio.InputError(f"invalid trajectory spec {path!r}: {e}") from e
    d.setdefault("n_frames", n_frames)
    d.setdefault("seed", seed)
    try:
        return TrajectorySpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (TypeError, ValueError) as e:
        raise rio.InputError(f"invalid trajectory spec: {e}") from e


def parse_pose(text: str) -> Pose:
    """'x,y,z[,yaw_deg]' in the field frame; yaw about +z."""
    v = [float(x) for x in text.split(",")]
    if len(v) not in (3, 4):
        raise rio.InputError(f"pose must be x,y,z[,yaw_deg]: {text!r}")
    yaw = math.radians(v[3]) if len(v) == 4 else 0.0
    return Pose(0.0, quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw), np.array(v[:3]))


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args, values) -> int:
    sim = rio.apply_overrides(SimulateConfig(), values)
    if args.scene:
        sim = dataclasses.replace(sim, scene=args.scene)
    if args.frames:
        sim = dataclasses.replace(sim, frames=args.frames)
    if args.scale:
        sim = dataclasses.replace(sim, true_scale=args.scale)
    seed = int(values.get("seed", 0))
    radar = rio.apply_overrides(RadarConfig(), values, prefix="radar_")
    intr = rio.apply_overrides(CameraIntrinsics(), values, prefix="camera_")
    scene = load_scene(sim.scene)
    traj = load_trajectory_spec(args.trajectory, sim.frames, seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise rio.InputError(f"cannot write to {out}: {e}") from e
    ds = generate_dataset(scene, traj, radar, intr, seed=seed, true_scale=sim.true_scale,
                          noise_dof=sim.noise_dof, noise_level=sim.noise_level, resolution=sim.resolution)
    m = rio.write_dataset(ds, out, seed)
    m.validate()
    print(f"wrote {len(ds.frames)} frames to {out}")
    return EXIT_OK


def _calibrate(state, dataset, param: ScaleParam, n_frames: int = 32):
    cubes = [f.cube for f in dataset.frames]
    return optimize_scale(state.scene, dataset.trajectory, cubes, dataset.radar, param, n_frames=n_frames)


def cmd_fit(args, values) -> int:
    ds, m = rio.read_dataset(args.manifest)
    cfg = train_config(values, rio.parse_antennas(args.antennas))
    weights = loss_weights(values)
    log_path = Path(args.log or str(args.out) + ".log.jsonl")
    if args.resume:
        state, cfg = restore_state(args.resume, ds, cfg)
        mode = "a"
    else:
        state = init_state(ds, cfg, args.scale)
        mode = "w"
    with open(log_path, mode) as fh:
        def callback(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        def run(n_iters):
            while state.step < n_iters:
                stop = n_iters if not args.checkpoint_every else min(
                    n_iters, (state.step // args.checkpoint_every + 1) * args.checkpoint_every)
                run_stage(state, cfg, weights, stop, callback)
                if args.checkpoint_every:
                    save_state(args.out, state, cfg)

        if state.stage == 1:
            if state.optimizer is None:
                state.optimizer = stage1_optimizer(state, cfg)
            run(cfg.stage1_iters)
            if args.scale is None and not args.no_calibration:
                res = _calibrate(state, ds, ScaleParam())
                state.traj.set_scale(res.s_opt)
                callback({"stage": "calibration"} | res.to_dict())
            begin_stage2(state, cfg)
        run(cfg.stage2_iters)
    save_state(args.out, state, cfg, {"n_frames": len(ds.frames)})
    print(f"fit complete: stage 2 step {state.step}, scale {float(state.traj.scale):.6g}, checkpoint {args.out}")
    return EXIT_OK


def _noise_for(ds, scale, m) -> NoiseModel:
    try:
        return fit_noise([f.cube for f in ds.frames], ds.speeds(scale), ds.radar.dopplers().numpy())
    except NoiseFitError:
        if m.noise:
            return NoiseModel(**m.noise)
        return NoiseModel(1.0, 1e-30, 0.0)


def _strip(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Ground truth over prediction, antennas side by side: (2 * n_range, K * n_doppler)."""
    top = np.concatenate([gt[..., k] for k in range(gt.shape[-1])], 1)
    bot = np.concatenate([pred[..., k] for k in range(pred.shape[-1])], 1)
    return np.concatenate([top, bot], 0)


def cmd_eval(args, values) -> int:
    ds, m = rio.read_dataset(args.manifest)
    (_, extra), meta = _checkpoint_meta(args.checkpoint)
    n_ckpt = meta.get("n_frames", extra["traj.offsets"].shape[0] if "traj.offsets" in extra else len(ds.frames))
    if n_ckpt != len(ds.frames):
        raise rio.InputError("checkpoint and manifest disagree on the number of frames (split mismatch)")
    state, cfg = restore_state(args.checkpoint, ds)
    train_idx, test_idx = m.split_indices(np.asarray(ds.trajectory.positions))
    idx = {"test": test_idx, "train": train_idx, "all": list(range(len(ds.frames)))}[args.split]
    scale = float(state.traj.scale)
    noise = _noise_for(ds, scale, m)
    report = evaluate(ds, state, idx, None, noise)
    out = report.to_dict() | {"split": args.split, "frames": idx, "noise": noise.to_dict()}
    ants = rio.parse_antennas(args.antennas) or cfg.antennas
    if ants is not None:
        out["trained_antennas"] = list(ants)
    _write_json(args.out, out)
    if args.strips:
        sd = Path(args.strips)
        sd.mkdir(parents=True, exist_ok=True)
        bounds = clip_bounds([f.cube for f in ds.frames])
        pick = idx[:: max(1, len(idx) // args.n_strips)][: args.n_strips]
        preds = render_frames(state, pick)
        for i, p in zip(pick, preds):
            img = _strip(bounds.apply(ds.frames[i].cube), bounds.apply(p))
            rio.write_heatmap(sd / f"strip_{i:05d}.png", img, {"rows": "ground truth / rendered, range bins",
                                                               "cols": "antenna-major Doppler bins"}, 0.0, 1.0)
    print(f"masked SSIM {report.mean_ssim:.4f}  masked PSNR {report.mean_psnr:.2f} dB  ({len(idx)} frames)")
    return EXIT_OK


def _checkpoint_meta(path):
    from .field import load_checkpoint

    try:
        scene, extra, meta = load_checkpoint(path)
    except (OSError, ValueError) as e:
        raise rio.InputError(f"cannot read checkpoint {path}: {e}") from e
    return (scene, extra), meta


def _scene_and_scale(path):
    (scene, extra), meta = _checkpoint_meta(path)
    scale = math.exp(float(extra["traj.log_scale"].reshape(-1)[0])) if "traj.log_scale" in extra else 1.0
    return scene, scale, meta


def cmd_superresolve(args, values) -> int:
    if args.n_azimuth < 1:
        raise rio.InputError("--n-azimuth must be >= 1")
    scene, scale, meta = _scene_and_scale(args.checkpoint)
    radar = RadarConfig.from_dict(meta["radar"]) if "radar" in meta else RadarConfig()
    poses = [parse_pose(p) for p in args.pose or []]
    if args.poses:
        poses += list(load_trajectory(args.poses).poses)
    if not poses:
        raise rio.InputError("no poses given (use --pose or --poses)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fov = radar.azimuth_fov
    for i, pose in enumerate(poses):
        ra = render_range_azimuth(scene, pose, args.n_azimuth, radar, scale, rays_per_map=args.rays).numpy()
        axes = {"rows": {"label": "range (m)", "start": radar.range_resolution / 2, "step": radar.range_resolution},
                "cols": {"label": "azimuth (deg)", "start": -fov / 2 + fov / args.n_azimuth / 2,
                         "step": fov / args.n_azimuth}}
        rio.write_heatmap(out / f"range_azimuth_{i:03d}.png", ra, axes, 0.0, float(max(ra.max(), 1e-30)))
    print(f"wrote {len(poses)} range-azimuth maps ({args.n_azimuth} azimuths) to {out}")
    return EXIT_OK


def occupancy_slice(scene, which: str, height: float, resolution: int) -> np.ndarray:
    geo = scene.camera_geometry if which == "camera" else scene.radar_geometry
    lo, hi = scene.bounds[0].double(), scene.bounds[1].double()
    if not lo[2] <= height <= hi[2]:
        raise rio.InputError(f"height {height} outside field bounds [{float(lo[2])}, {float(hi[2])}]")
    xs = lo[0] + (torch.arange(resolution, dtype=torch.float64) + 0.5) / resolution * (hi[0] - lo[0])
    ys = lo[1] + (torch.arange(resolution, dtype=torch.float64) + 0.5) / resolution * (hi[1] - lo[1])
    Y, X = torch.meshgrid(ys, xs, indexing="ij")
    pts = torch.stack([X, Y, torch.full_like(X, height)], -1).reshape(-1, 3).float()
    with torch.no_grad():
        a = geo.alpha(pts).reshape(resolution, resolution)
    return a.clamp(0, 1).numpy()


def depth_map(scene, which: str, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    geo = scene.camera_geometry if which == "camera" else scene.radar_geometry
    from .geometry import quat_to_matrix

    rot = torch.as_tensor(quat_to_matrix(pose.rotation), dtype=torch.float32)
    o, d = camera_rays_for_pose(rot, torch.tensor(np.array(pose.position), dtype=torch.float32), intr)
    with torch.no_grad():
        out = render_camera_rays(scene, o, d, geometry=geo, with_color=False)
    return out.depth.reshape(intr.height, intr.width).numpy()


def cmd_occupancy_slice(args, values) -> int:
    scene, _, meta = _scene_and_scale(args.checkpoint)
    sl = occupancy_slice(scene, args.field, args.height, args.resolution)
    b = scene.bounds
    axes = {"rows": {"label": "y", "start": float(b[0, 1]), "step": float(b[1, 1] - b[0, 1]) / args.resolution},
            "cols": {"label": "x", "start": float(b[0, 0]), "step": float(b[1, 0] - b[0, 0]) / args.resolution},
            "height": args.height, "field": args.field}
    rio.write_heatmap(args.out, sl, axes, 0.0, 1.0)
    poses = [parse_pose(p) for p in args.view or []]
    if poses:
        intr = CameraIntrinsics(**meta["intrinsics"]) if "intrinsics" in meta else CameraIntrinsics()
        stem = Path(args.out)
        for i, pose in enumerate(poses):
            dm = depth_map(scene, args.field, pose, intr)
            hi = float(max(dm.max(), 1e-6))
            rio.write_heatmap(stem.with_name(f"{stem.stem}_depth_{i:03d}{stem.suffix}"), dm,
                              {"rows": "image v", "cols": "image u", "sentinel": -1.0, "field": args.field}, -1.0, hi)
    print(f"wrote {args.field} occupancy slice at height {args.height} to {args.out}")
    return EXIT_OK


def plot_curve(path, curve, size=(320, 200)) -> None:
    """Objective vs log-scale as a small line plot."""
    from PIL import Image, ImageDraw

    pts = sorted((math.log(s), v) for s, v in curve)
    w, h = size
    img = Image.new("L", size, 255)
    dr = ImageDraw.Draw(img)
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    sx = (w - 20) / (x1 - x0 if x1 > x0 else 1)
    sy = (h - 20) / (y1 - y0 if y1 > y0 else 1)
    xy = [(10 + (x - x0) * sx, h - 10 - (y - y0) * sy) for x, y in pts]
    dr.rectangle([0, 0, w - 1, h - 1], outline=0)
    dr.line(xy, fill=0, width=1)
    img.save(path)


def cmd_calibrate_scale(args, values) -> int:
    ds, m = rio.read_dataset(args.manifest)
    scene, _, _ = _scene_and_scale(args.checkpoint)
    param = ScaleParam(args.s_init, args.s_min, args.s_max)
    res = optimize_scale(scene, ds.trajectory, [f.cube for f in ds.frames], ds.radar, param, n_frames=args.frames)
    _write_json(args.out, res.to_dict())
    plot_curve(Path(args.out).with_suffix(".png"), res.curve)
    print(f"scale {res.s_opt:.6g} (initial {res.s_init:.6g})")
    return EXIT_OK


def cmd_fit_noise(args, values) -> int:
    ds, m = rio.read_dataset(args.manifest)
    scale = args.scale
    if scale is None and args.checkpoint:
        scale = _scene_and_scale(args.checkpoint)[1]
    nm = fit_noise([f.cube for f in ds.frames], ds.speeds(scale), ds.radar.dopplers().numpy())
    _write_json(args.out, nm.to_dict())
    print(f"chi-square dof {nm.dof:.4g} scale {nm.scale:.4g} threshold {nm.threshold:.4g}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdfield", description="Radar range-Doppler field fitting and simulation.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None, help="CPU threads (default: available cores)")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--scene", default=None, help="preset name (general, plates, tent, targets) or JSON scene file")
    s.add_argument("--trajectory", default=None, help="JSON trajectory spec")
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--scale", type=float, default=None, help="hidden metric scale")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("fit", help="two-stage field fit")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", default=None, help="JSON-lines loss log (default: <out>.log.jsonl)")
    s.add_argument("--antennas", default=None, help="train on a subset, e.g. 0-3")
    s.add_argument("--scale", type=float, default=None, help="known metric scale (skips calibration)")
    s.add_argument("--no-calibration", action="store_true")
    s.add_argument("--resume", default=None, help="continue from a checkpoint written by fit")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.set_defaults(fn=cmd_fit)

    s = sub.add_parser("eval", help="masked SSIM / PSNR on held-out frames")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="JSON report")
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.add_argument("--antennas", default=None)
    s.add_argument("--strips", default=None, help="directory for comparison strips")
    s.add_argument("--n-strips", type=int, default=4)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("superresolve", help="range-azimuth maps at arbitrary azimuth counts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pose", action="append", help="x,y,z[,yaw_deg]; repeatable")
    s.add_argument("--poses", default=None, help="trajectory JSON-lines file")
    s.add_argument("--n-azimuth", type=int, default=128)
    s.add_argument("--rays", type=int, default=256, help="sub-rays per map")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_superresolve)

    s = sub.add_parser("occupancy-slice", help="horizontal occupancy slice and depth maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--height", type=float, required=True)
    s.add_argument("--field", choices=("camera", "radar"), default="radar")
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--view", action="append", help="depth-map pose x,y,z[,yaw_deg]; repeatable")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_occupancy_slice)

    s = sub.add_parser("calibrate-scale", help="recover metric scale from a fitted camera field")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="JSON report (a PNG curve is written alongside)")
    s.add_argument("--s-init", type=float, default=1.0)
    s.add_argument("--s-min", type=float, default=0.05)
    s.add_argument("--s-max", type=float, default=20.0)
    s.add_argument("--frames", type=int, default=32)
    s.set_defaults(fn=cmd_calibrate_scale)

    s = sub.add_parser("fit-noise", help="chi-square noise model from static-Doppler bins")
    s.add_argument("--manifest", required=True)
    s.add_argument("--scale", type=float, default=None)
    s.add_argument("--checkpoint", default=None, help="take the scale from a fitted checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fit_noise)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    workers = args.workers or os.cpu_count() or 1
    torch.set_num_threads(max(1, workers))
    try:
        values = load_settings(args)
        return args.fn(args, values)
    except NumericalDivergence as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (rio.InputError, FailedCalibration, NoiseFitError, FileNotFoundError, PermissionError,
            IsADirectoryError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Two-stage fitting: camera field first, then radar fine-tuning with pose refinement."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .field import FieldConfig, SceneField, freeze, load_checkpoint, save_checkpoint
from .geometry import TrajectoryParams
from .losses import (LossWeights, loss_bce_geometry, loss_normals, loss_reconstruction, loss_ssim,
                     pose_regularizers)
from .metrics import EvalReport, NoiseModel, clip_bounds, evaluate_frames, fit_noise
from .optim import Adam, LRSchedule
from .proposal import loss_interlevel, proposal_sample
from .renderer import RadarConfig, camera_rays_for_pose, ray_box, render_camera_rays, render_radar_frames

log = logging.getLogger(__name__)


class NumericalDivergence(RuntimeError):
    """A non-finite loss was encountered during training."""


@dataclass
class TrainConfig:
    seed: int = 0
    stage1_iters: int = 2000
    stage2_iters: int = 2000
    camera_rays: int = 1024
    radar_frames: int = 4  # whole frames per stage-2 iteration
    camera_lr: float = 5e-2
    camera_lr_final: float = 5e-4
    radar_lr: float = 1e-2
    radar_lr_final: float = 1e-4
    pose_lr: float = 1e-3
    pose_lr_final: float = 1e-4
    refine_poses: bool = True
    learn_scale: bool = False
    freeze_radar_geometry: bool = False
    antennas: tuple | None = None
    bce_points: int = 4096
    normal_grad_rays: int = 256
    stage2_camera_rays: int = 256
    train_sampler: str | None = None
    train_circle_samples: int | None = None
    pose_window: int = 15
    resolutions: tuple = (16, 32, 64)
    feature_dim: int = 2
    sh_levels: int = 4
    use_bases: bool = True
    use_sh: bool = True
    reflectance_squash: str = "exp"
    reflectance_hidden: int = 0
    log_every: int = 50

    def field_config(self, bounds, radar: RadarConfig) -> FieldConfig:
        return FieldConfig(bounds=tuple(tuple(float(v) for v in b) for b in bounds),
                           resolutions=tuple(self.resolutions), feature_dim=self.feature_dim,
                           sh_levels=self.sh_levels, use_bases=self.use_bases, use_sh=self.use_sh,
                           reflectance_squash=self.reflectance_squash, reflectance_hidden=self.reflectance_hidden,
                           **radar.gain_kwargs())

    def radar_train_config(self, radar: RadarConfig) -> RadarConfig:
        kw = {}
        if self.train_sampler:
            kw["sampler"] = self.train_sampler
        if self.train_circle_samples:
            kw["circle_samples"] = self.train_circle_samples
        return replace(radar, **kw)


def desk_weights() -> LossWeights:
    """Loss weights for mean-reduced losses on percentile-normalised desk-scale frames."""
    return LossWeights(r=1.0, ssim=0.1, bce=1e-4, prop_r=1.0, norm=0.1, norm_g=1e-3, norm_o=1e-4,
                       regp=1e-3, regv=1.0, rega=5e-3, regk=1.0)


# --------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    scene: SceneField
    traj: TrajectoryParams
    radar: RadarConfig
    span: float  # amplitude normalisation (dataset p99.99 - p0.01)
    offset: float
    train_idx: list
    gt: torch.Tensor  # (N, n_range, n_doppler, K) raw training targets
    images: torch.Tensor  # (N, H*W, 3)
    normal_maps: torch.Tensor  # (N, H*W, 3)
    intrinsics: object
    generator: torch.Generator
    stage: int = 1
    step: int = 0
    history: list = field(default_factory=list)
    optimizer: Adam | None = None


def init_state(dataset, config: TrainConfig, scale: float | None = None) -> TrainState:
    torch.manual_seed(config.seed)
    train_idx, _ = dataset.split()
    fc = config.field_config(dataset.bounds, dataset.radar)
    scene = SceneField(fc, seed=config.seed)
    traj = TrajectoryParams(dataset.trajectory)
    for p in traj.parameters():
        p.requires_grad_(False)
    if scale is not None:
        traj.set_scale(scale)
    b = clip_bounds([dataset.frames[i].cube for i in train_idx])
    gt = torch.tensor(np.stack([f.cube for f in dataset.frames]), dtype=torch.float32)
    H, W = dataset.intrinsics.height, dataset.intrinsics.width
    imgs = torch.tensor(np.array(dataset.images), dtype=torch.float32).reshape(len(dataset.images), H * W, 3)
    nm = torch.tensor(np.array(dataset.normal_maps), dtype=torch.float32).reshape(len(dataset.images), H * W, 3)
    return TrainState(scene, traj, dataset.radar, max(b.high - b.low, 1e-12), b.low, train_idx, gt, imgs, nm,
                      dataset.intrinsics, torch.Generator().manual_seed(config.seed))


# --------------------------------------------------------------------------
# helpers


def _check(loss: torch.Tensor, terms: dict, stage: int, step: int) -> None:
    if not torch.isfinite(loss):
        bad = {k: float(v) for k, v in terms.items()}
        raise NumericalDivergence(f"non-finite loss at stage {stage} step {step}: {bad}")


def _camera_batch(state: TrainState, n: int, frames: Sequence[int] | None = None):
    g = state.generator
    idx = torch.as_tensor(state.train_idx if frames is None else frames)
    f = idx[torch.randint(len(idx), (n,), generator=g)]
    px = torch.randint(state.images.shape[1], (n,), generator=g)
    rots = state.traj.rotations(f)
    pos = state.traj.positions(f)
    dirs_local = state.intrinsics.directions(pos.dtype)[px]
    d = torch.einsum("nab,nb->na", rots, dirs_local)
    return pos, d, state.images[f, px], state.normal_maps[f, px]


def gradient_normals(geometry, x: torch.Tensor, h: float) -> torch.Tensor:
    """-grad(alpha)/|grad(alpha)| by central differences."""
    offs = torch.eye(3, dtype=x.dtype) * h
    pts = torch.cat([x[:, None, :] + offs[None], x[:, None, :] - offs[None]], 1)  # (N, 6, 3)
    a = geometry.alpha(pts.reshape(-1, 3)).reshape(-1, 6)
    grad = (a[:, :3] - a[:, 3:]) / (2 * h)
    return -grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-8)


def _proposal_loss_camera(scene: SceneField, o, d, out) -> torch.Tensor:
    near = out.edges[:, 0]
    far = out.edges[:, -1]
    ps = proposal_sample(scene.proposal, o, d, near, far, 1, None)
    w = out.weights.detach()
    return sum(loss_interlevel(out.edges.detach(), w, e, pw) for e, pw in ps.histograms)


def _normal_terms(scene: SceneField, out, d, gt_n, n_grad_rays: int, geometry):
    w = out.weights
    n_pts = out.normals
    n_bar = (w.detach()[..., None] * n_pts).sum(1)
    n_bar = n_bar / n_bar.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    valid = gt_n.norm(dim=-1) > 0.5
    l_norm, _, _ = loss_normals(n_bar, gt_n, gt_mask=valid)
    _, _, l_o = loss_normals(n_pts, None, w.detach(), None, d)
    # density-gradient normals on a subset of rays, only where the weights matter
    k = min(n_grad_rays, w.shape[0])
    sel = (w[:k].detach() > 1e-3).nonzero(as_tuple=True)
    l_g = torch.zeros(())
    if sel[0].numel():
        h = 0.5 * float((scene.bounds[1] - scene.bounds[0]).max()) / max(geometry.grid.resolutions)
        n_hat = gradient_normals(geometry, out.points[:k][sel], h)
        l_g = (w[:k][sel].detach() * ((n_pts[:k][sel] - n_hat) ** 2).sum(-1)).sum() / k
    return l_norm, l_g, l_o


# --------------------------------------------------------------------------
# stage 1


def stage1_optimizer(state: TrainState, config: TrainConfig) -> Adam:
    sc = state.scene
    sched = LRSchedule(config.camera_lr, config.camera_lr_final, config.stage1_iters)
    params = (list(sc.camera_geometry.parameters()) + list(sc.camera_appearance.parameters()) +
              list(sc.proposal.parameters()) + list(sc.normals.parameters()))
    return Adam({"camera": (params, sched)})


def stage1_step(state: TrainState, config: TrainConfig, weights: LossWeights) -> dict:
    sc = state.scene
    o, d, rgb_gt, n_gt = _camera_batch(state, config.camera_rays)
    out = render_camera_rays(sc, o, d, generator=state.generator, with_normals=True)
    l_rgb = ((out.rgb - rgb_gt) ** 2).mean()
    l_prop = _proposal_loss_camera(sc, o, d, out)
    l_norm, l_g, l_o = _normal_terms(sc, out, d, n_gt, config.normal_grad_rays, sc.camera_geometry)
    loss = l_rgb + weights.prop_r * l_prop + weights.norm * l_norm + weights.norm_g * l_g + weights.norm_o * l_o
    terms = dict(rgb=l_rgb, prop=l_prop, norm=l_norm, norm_g=l_g, norm_o=l_o)
    _check(loss, terms, 1, state.step)
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    return {k: float(v.detach()) for k, v in terms.items()} | {"loss": float(loss.detach())}


# --------------------------------------------------------------------------
# stage 2


def stage2_optimizer(state: TrainState, config: TrainConfig) -> Adam:
    sc = state.scene
    sched = LRSchedule(config.radar_lr, config.radar_lr_final, config.stage2_iters)
    if config.freeze_radar_geometry:
        freeze(sc.radar_geometry.grid)
        freeze(sc.radar_geometry.density_head)
    radar = [p for p in sc.radar_geometry.parameters() if p.requires_grad]
    radar += list(sc.radar_appearance.parameters()) + list(sc.gains.parameters())
    radar += list(sc.proposal.parameters()) + list(sc.normals.parameters())
    groups = {"radar": (radar, sched)}
    pose = []
    if config.refine_poses:
        pose.append(state.traj.offsets)
    if config.learn_scale:
        pose.append(state.traj.log_scale)
    for p in state.traj.parameters():
        p.requires_grad_(any(p is q for q in pose))
    if pose:
        groups["pose"] = (pose, LRSchedule(config.pose_lr, config.pose_lr_final, config.stage2_iters))
    return Adam(groups)


def begin_stage2(state: TrainState, config: TrainConfig) -> None:
    state.scene.distill()
    state.stage = 2
    state.step = 0
    state.optimizer = stage2_optimizer(state, config)


def stage2_step(state: TrainState, config: TrainConfig, weights: LossWeights) -> dict:
    sc, g = state.scene, state.generator
    rc = config.radar_train_config(state.radar)
    idx = torch.as_tensor(state.train_idx)
    f = idx[torch.randperm(len(idx), generator=g)[: config.radar_frames]]
    rots, pos, vel = state.traj.rotations(f), state.traj.positions(f), state.traj.velocities(f)
    cube, skipped, rays = render_radar_frames(sc, rots, pos, vel, state.traj.scale, rc, generator=g,
                                              return_rays=True)
    ant = list(range(rc.n_antenna)) if config.antennas is None else list(config.antennas)
    keep = ~skipped
    pred = cube[keep][..., ant] / state.span
    gt = state.gt[f][keep][..., ant] / state.span
    zero = torch.zeros(())
    l_r = loss_reconstruction(gt, pred) if pred.numel() else zero
    l_ssim = loss_ssim(gt, pred) if pred.numel() else zero
    l_prop = zero
    if rays is not None and rays.samples.histograms:
        edges = torch.arange(rc.n_range + 1, dtype=pred.dtype) * rc.range_resolution
        edges = edges.expand(rays.weights.shape[0], -1)
        l_prop = sum(loss_interlevel(edges, rays.weights.detach(), e * 1.0, w)
                     for e, w in rays.samples.histograms)
    # geometry distillation constraint at random points and along the rendered rays
    lo, hi = sc.bounds[0], sc.bounds[1]
    x = lo + (hi - lo) * torch.rand(config.bce_points, 3, generator=g)
    if rays is not None and rays.samples.points is not None:
        pts = rays.samples.points.reshape(-1, 3)
        pts = pts[sc.radar_geometry.grid.inside(pts)]
        if pts.shape[0]:
            x = torch.cat([x, pts[torch.randint(pts.shape[0], (config.bce_points,), generator=g)]], 0)
    with torch.no_grad():
        a_c = sc.camera_geometry.alpha(x)
    l_bce = loss_bce_geometry(sc.radar_geometry.alpha(x), a_c)
    l_norm = l_g = l_o = zero
    if config.stage2_camera_rays > 0 and weights.norm > 0:
        o, d, _, n_gt = _camera_batch(state, config.stage2_camera_rays)
        with torch.no_grad():
            out = render_camera_rays(sc, o.detach(), d.detach(), generator=g, with_color=False)
        pts = out.points
        n_pts = sc.normals(pts.reshape(-1, 3)).reshape(pts.shape)
        n_bar = (out.weights[..., None] * n_pts).sum(1)
        n_bar = n_bar / n_bar.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        valid = n_gt.norm(dim=-1) > 0.5
        l_norm, _, l_o = loss_normals(n_bar, n_gt, gt_mask=valid)
        _, _, l_o = loss_normals(n_pts, None, out.weights, None, d)
    l_p = l_v = l_a = l_k = zero
    if config.refine_poses:
        l_p, l_v, l_a, l_k = pose_regularizers(state.traj, config.pose_window)
    loss = (weights.r * l_r + weights.ssim * l_ssim + weights.prop_r * l_prop + weights.bce * l_bce +
            weights.norm * l_norm + weights.norm_o * l_o + weights.regp * l_p + weights.regv * l_v +
            weights.rega * l_a + weights.regk * l_k)
    terms = dict(r=l_r, ssim=l_ssim, prop=l_prop, bce=l_bce, norm=l_norm, norm_o=l_o,
                 regp=l_p, regv=l_v, rega=l_a, regk=l_k)
    _check(loss, terms, 2, state.step)
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    return {k: float(v.detach()) for k, v in terms.items()} | {"loss": float(loss.detach())}


# --------------------------------------------------------------------------
# driver


def run_stage(state: TrainState, config: TrainConfig, weights: LossWeights, n_iters: int,
              callback: Callable[[dict], None] | None = None) -> None:
    step_fn = stage1_step if state.stage == 1 else stage2_step
    while state.step < n_iters:
        rec = step_fn(state, config, weights)
        state.step += 1
        if state.step % config.log_every == 0 or state.step == n_iters:
            rec = {"stage": state.stage, "step": state.step} | rec
            state.history.append(rec)
            if callback:
                callback(rec)
            log.info("stage %d step %d loss %.5g", state.stage, state.step, rec["loss"])


def train(dataset, config: TrainConfig = TrainConfig(), weights: LossWeights | None = None,
          scale: float | None = None, state: TrainState | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainState:
    """Stage 1 (camera, proposal, normals), distillation, stage 2 (radar, gains, poses)."""
    weights = desk_weights() if weights is None else weights
    if state is None:
        state = init_state(dataset, config, scale)
    if state.stage == 1:
        if state.optimizer is None:
            state.optimizer = stage1_optimizer(state, config)
        run_stage(state, config, weights, config.stage1_iters, callback)
        begin_stage2(state, config)
    run_stage(state, config, weights, config.stage2_iters, callback)
    return state


# --------------------------------------------------------------------------
# evaluation


def render_frames(state: TrainState, idx: Sequence[int], radar: RadarConfig | None = None,
                  batch: int = 4, sampler: str | None = None) -> list[np.ndarray]:
    rc = radar or state.radar
    out = []
    with torch.no_grad():
        for i in range(0, len(idx), batch):
            f = torch.as_tensor(list(idx[i:i + batch]))
            cube, _ = render_radar_frames(state.scene, state.traj.rotations(f), state.traj.positions(f),
                                          state.traj.velocities(f), state.traj.scale, rc, sampler=sampler)
            out.extend(c.clamp_min(0).numpy() for c in cube)
    return out


def evaluate(dataset, state: TrainState, idx: Sequence[int] | None = None, antennas: Sequence[int] | None = None,
             noise: NoiseModel | None = None, sampler: str | None = None) -> EvalReport:
    """Masked SSIM / PSNR of rendered frames against the dataset's ground truth."""
    if idx is None:
        idx = dataset.split()[1]
    gt_all = [f.cube for f in dataset.frames]
    if noise is None:
        noise = fit_noise(gt_all, dataset.speeds(), dataset.radar.dopplers().numpy())
    bounds = clip_bounds(gt_all)
    pred = render_frames(state, idx, sampler=sampler)
    gt = [gt_all[i] for i in idx]
    gn = [bounds.apply(c) for c in gt]
    pn = [bounds.apply(c) for c in pred]
    masks = [c >= noise.threshold for c in gt]
    return evaluate_frames(gn, pn, masks, bounds, antennas)


# --------------------------------------------------------------------------
# training checkpoints


def config_to_dict(config: TrainConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(config)))


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    for k in ("resolutions", "antennas"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return TrainConfig(**d)


def save_state(path, state: TrainState, config: TrainConfig, extra_meta: dict | None = None) -> None:
    """Scene parameters, trajectory offsets, optimizer moments and RNG state in one field checkpoint."""
    extra = {"traj.offsets": state.traj.offsets.detach(), "traj.log_scale": state.traj.log_scale.detach().reshape(1),
             "rng": state.generator.get_state().to(torch.float32)}
    opt_meta = None
    if state.optimizer is not None:
        sd = state.optimizer.state_dict()
        opt_meta = {"step": sd["step"], "groups": {k: len(v) for k, v in sd["m"].items()}}
        for k in sd["m"]:
            for i, (m, v) in enumerate(zip(sd["m"][k], sd["v"][k])):
                extra[f"opt.{k}.m.{i}"] = m
                extra[f"opt.{k}.v.{i}"] = v
    meta = {"stage": state.stage, "step": state.step, "optimizer": opt_meta, "train_config": config_to_dict(config),
            "radar": state.radar.to_dict(), "span": state.span, "offset": state.offset,
            "intrinsics": state.intrinsics.to_dict(), "history": state.history}
    meta.update(extra_meta or {})
    save_checkpoint(path, state.scene, extra, meta)


def restore_state(path, dataset, config: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    """Rebuild a TrainState from :func:`save_state` output so that training continues bit-identically."""
    scene, extra, meta = load_checkpoint(path)
    config = config or config_from_dict(meta["train_config"])
    state = init_state(dataset, config)
    state.scene = scene
    with torch.no_grad():
        state.traj.offsets.copy_(extra["traj.offsets"])
        state.traj.log_scale.copy_(extra["traj.log_scale"].reshape(()))
    state.generator.set_state(extra["rng"].to(torch.uint8))
    state.stage, state.step = int(meta["stage"]), int(meta["step"])
    state.history = list(meta.get("history", []))
    state.span, state.offset = float(meta["span"]), float(meta["offset"])
    if state.stage == 2:
        freeze(scene.camera_geometry)
        freeze(scene.camera_appearance)
    om = meta.get("optimizer")
    if om is not None:
        state.optimizer = (stage1_optimizer if state.stage == 1 else stage2_optimizer)(state, config)
        m = {k: [extra[f"opt.{k}.m.{i}"] for i in range(n)] for k, n in om["groups"].items()}
        v = {k: [extra[f"opt.{k}.v.{i}"] for i in range(n)] for k, n in om["groups"].items()}
        state.optimizer.load_state_dict({"step": om["step"], "m": m, "v": v})
    return state, config

"""Synthetic scenes, trajectories and datasets with exact ground truth.

Ground-truth fields are baked into the same :class:`SceneField` classes used
for fitting, on a single-level grid.  Camera and radar occupancies come from
per-material alphas times a soft indicator of each primitive's signed
distance; reflectance is ``base * exp(W * (beta_rho(w.n) - 1))`` with one
retroreflective profile (``rho``, ``W``) shared by the scene.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .field import FieldConfig, SceneField
from .geometry import Trajectory, quat_from_yaw, quat_multiply, quat_from_axis_angle
from .metrics import NoiseModel
from .renderer import (CameraIntrinsics, RadarConfig, RangeDopplerFrame, camera_rays_for_pose,
                       render_camera_rays, render_radar_frames)
from .geometry import quat_to_matrix

LOGIT_CLAMP = 12.0


# --------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class Material:
    camera_alpha: float = 1.0
    radar_alpha: float = 1.0
    base_reflectance: float = 1.0
    roughness: float = 1.0
    color: tuple = (0.6, 0.6, 0.6)

    def __post_init__(self):
        for name in ("camera_alpha", "radar_alpha"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.base_reflectance < 0:
            raise ValueError("base_reflectance must be >= 0")
        if self.roughness <= 0:
            raise ValueError("roughness must be > 0")


@dataclass(frozen=True)
class Primitive:
    shape: str  # box | sphere | plane
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (0.5, 0.5, 0.5)  # box half-extents; sphere radius in size[0]
    yaw: float = 0.0  # radians about +z (boxes)
    normal: tuple = (0.0, 0.0, 1.0)  # planes: solid on the -normal side of center
    shell: float = 0.0  # > 0 hollows a box/sphere into a wall of this thickness
    material: Material = Material()

    def __post_init__(self):
        if self.shape not in ("box", "sphere", "plane"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.shape == "sphere":
            d = np.linalg.norm(x - c, axis=-1) - self.size[0]
        elif self.shape == "plane":
            n = np.asarray(self.normal, dtype=np.float64)
            n = n / np.linalg.norm(n)
            d = (x - c) @ n
        else:
            cy, sy = math.cos(self.yaw), math.sin(self.yaw)
            q = x - c
            q = np.stack([cy * q[..., 0] + sy * q[..., 1], -sy * q[..., 0] + cy * q[..., 1], q[..., 2]], -1)
            e = np.abs(q) - np.asarray(self.size, dtype=np.float64)
            d = np.linalg.norm(np.maximum(e, 0.0), axis=-1) + np.minimum(e.max(-1), 0.0)
        if self.shell > 0:
            d = np.abs(d) - self.shell / 2
        return d

    def sdf_normal(self, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
        g = np.stack([(self.sdf(x + h * e) - self.sdf(x - h * e)) / (2 * h) for e in np.eye(3)], -1)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    bounds: tuple = ((-4.0, -4.0, 0.0), (4.0, 4.0, 3.0))
    retro_weight: float = 2.0  # W in the shared reflectance profile

    def __post_init__(self):
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        if np.any(hi <= lo):
            raise ValueError("bounds must have positive extent")
        for p in self.primitives:
            if p.shape != "plane" and np.any((np.asarray(p.center) < lo) | (np.asarray(p.center) > hi)):
                raise ValueError("primitive centre outside scene bounds")

    def roughness(self) -> float:
        vis = sorted({p.material.roughness for p in self.primitives if p.material.radar_alpha > 0})
        if len(vis) > 1:
            raise ValueError("radar-visible materials must share one roughness")
        return vis[0] if vis else 1.0


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "orbit"  # orbit | lawnmower | random-walk
    n_frames: int = 300
    rate: float = 15.0  # Hz
    speed: float = 1.0  # m/s
    center: tuple = (0.0, 0.0)
    radius: float = 2.5
    height: float = 1.0
    radius_wobble: float = 0.3  # fractional radius variation along the orbit
    height_wobble: float = 0.15  # metres
    look_offset: float = 20.0  # degrees from "towards centre" towards the direction of travel
    extent: float = 3.0  # lawnmower half-width
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("orbit", "lawnmower", "random-walk"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.speed <= 0.05:
            raise ValueError("speed must be bounded away from zero")
        if self.n_frames < 3:
            raise ValueError("need at least 3 frames")


# --------------------------------------------------------------------------
# trajectories


def _path(spec: TrajectorySpec, s: np.ndarray) -> np.ndarray:
    """Position as a function of arc-length-like parameter s (metres)."""
    cx, cy = spec.center
    if spec.kind == "orbit":
        phi = s / spec.radius
        r = spec.radius * (1 + spec.radius_wobble * np.sin(0.8 * phi))
        z = spec.height + spec.height_wobble * np.sin(1.3 * phi)
        return np.stack([cx + r * np.cos(phi), cy + r * np.sin(phi), z], -1)
    if spec.kind == "lawnmower":
        # straight lanes along x joined by half-circle turns; the lane index sweeps up and back down
        e, r = spec.extent, 0.4
        n_lanes = max(2, int(2 * e / (2 * r)) + 1)
        straight = 2 * e
        period = straight + np.pi * r
        k = np.floor(s / period)
        u = s - k * period

        def lane_y(i):
            q = np.mod(i, 2 * (n_lanes - 1))
            return -e + 2 * r * np.where(q <= n_lanes - 1, q, 2 * (n_lanes - 1) - q)

        y0, y1 = lane_y(k), lane_y(k + 1)
        direction = np.where(np.mod(k, 2) == 0, 1.0, -1.0)
        side = np.sign(y1 - y0)
        theta = np.clip((u - straight) / r, 0, np.pi)
        on_lane = u < straight
        x = np.where(on_lane, direction * (u - e), direction * (e + r * np.sin(theta)))
        y = np.where(on_lane, y0, 0.5 * (y0 + y1) - side * r * np.cos(theta))
        return np.stack([cx + x, cy + y, np.full_like(s, spec.height)], -1)
    return _random_walk(spec, s)


def _random_walk(spec: TrajectorySpec, s: np.ndarray, ds: float = 2e-3, s0: float = -1.0) -> np.ndarray:
    """Unit-speed planar wander: smooth random curvature, steered back inside ``radius`` of the centre.

    The path is integrated from the fixed start ``s0`` with a fixed step, so every
    call sees the same curve regardless of the queried range.
    """
    rng = np.random.default_rng(spec.seed)
    freqs = rng.uniform(0.3, 1.2, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=4)
    amps = rng.uniform(0.2, 0.5, size=3)
    n = int(np.ceil((max(float(np.max(s)), s0) - s0) / ds)) + 2
    grid = s0 + ds * np.arange(n)
    cx, cy = spec.center
    xy = np.zeros((n, 2))
    theta = phases[3]
    for i in range(1, n):
        kappa = float((amps * np.sin(freqs * grid[i - 1] + phases[:3])).sum())
        dx, dy = cx - xy[i - 1, 0], cy - xy[i - 1, 1]
        excess = math.sqrt(dx * dx + dy * dy) - spec.radius
        if excess > 0:  # steering strength ramps up smoothly past the radius
            err = math.atan2(dy, dx) - theta
            kappa += 2.0 * min(excess / 0.5, 1.0) * math.atan2(math.sin(err), math.cos(err))
        theta += kappa * ds
        xy[i] = xy[i - 1] + ds * np.array([math.cos(theta), math.sin(theta)])
    # start at the centre-relative offset given by the seed
    xy += np.array([cx, cy]) + 0.3 * spec.radius * rng.uniform(-1, 1, size=2)
    x = np.interp(s, grid, xy[:, 0])
    y = np.interp(s, grid, xy[:, 1])
    z = spec.height + spec.height_wobble * np.sin(0.5 * freqs[0] * s + phases[0])
    return np.stack([x, y, z], -1)


def make_trajectory(spec: TrajectorySpec) -> Trajectory:
    """Metric trajectory with near-constant speed along the path."""
    n = spec.n_frames
    t = np.arange(n) / spec.rate
    # reparameterise to constant speed with a dense arc-length table
    # the table starts before s = 0 so the central difference at t = 0 stays two-sided
    fine = np.linspace(-1.0, spec.speed * t[-1] * 3 + 10, 20000)
    pts = _path(spec, fine)
    arc = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    arc -= np.interp(0.0, fine, arc)
    s_of_t = np.interp(spec.speed * t, arc, fine)
    pos = _path(spec, s_of_t)
    h = 1e-3
    vel = (_path(spec, np.interp(spec.speed * (t + h), arc, fine)) -
           _path(spec, np.interp(spec.speed * (t - h), arc, fine))) / (2 * h)
    heading = np.arctan2(vel[:, 1], vel[:, 0])
    if spec.kind == "orbit":
        to_c = np.arctan2(spec.center[1] - pos[:, 1], spec.center[0] - pos[:, 0])
        # rotate the inward look direction towards the travel direction
        delta = np.arctan2(np.sin(heading - to_c), np.cos(heading - to_c))
        yaw = to_c + np.sign(delta) * math.radians(spec.look_offset)
    else:
        yaw = heading
    quats = quat_from_yaw(yaw)
    return Trajectory(t, quats, pos, vel, 1.0)


def scaleless(traj: Trajectory, true_scale: float) -> Trajectory:
    """Trajectory as structure-from-motion would report it: metric / true_scale, scale unknown (1)."""
    return Trajectory(traj.timestamps, traj.rotations, traj.positions / true_scale,
                      traj.velocities / true_scale, 1.0)


# --------------------------------------------------------------------------
# baking


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.clip(np.log(p) - np.log1p(-p), -LOGIT_CLAMP, LOGIT_CLAMP)


@dataclass
class BakedScene:
    field: SceneField
    spec: SceneSpec
    resolution: int
    camera_alpha: np.ndarray  # (R, R, R) node values, [z, y, x]
    radar_alpha: np.ndarray
    normals: np.ndarray  # (R, R, R, 3)
    primitive_index: np.ndarray  # (R, R, R) owning primitive, -1 for empty nodes


def bake_scene(spec: SceneSpec, resolution: int = 64, radar: RadarConfig | None = None,
               softness: float = 0.25) -> BakedScene:
    """Voxelise primitives into a ground-truth SceneField (single-level grids, 4 features).

    Geometry features are [occupancy logit, log reflectance | r, g, b logits]; the
    code head copies features into the first four code channels and the appearance
    heads read them back, so the GT is exactly representable by the renderer.
    ``softness`` is the surface transition width in voxels.
    """
    radar = radar or RadarConfig()
    rho = spec.roughness()
    cfg = FieldConfig(bounds=tuple(tuple(float(v) for v in b) for b in spec.bounds), resolutions=(resolution,),
                      feature_dim=4, code_dim=15, roughnesses=(float(rho),), use_bases=True, use_sh=True,
                      normal_resolutions=(resolution,), proposal_resolutions=(16,), proposal_samples=(16,),
                      **{k: v for k, v in radar.gain_kwargs().items()})
    scene = SceneField(cfg, seed=0)
    grid = scene.radar_geometry.grid
    x = grid.node_positions(0).double().numpy()  # (R, R, R, 3)
    voxel = float(np.max(np.asarray(spec.bounds[1]) - np.asarray(spec.bounds[0]))) / (resolution - 1)
    if any(p.shape != "plane" and min(p.size if p.shape == "box" else p.size[:1]) < voxel / 2
           for p in spec.primitives) or any(0 < p.shell < voxel for p in spec.primitives):
        warnings.warn("grid resolution too coarse for the smallest primitive", stacklevel=2)
    tau = softness * voxel
    shape = x.shape[:3]
    cam = np.zeros(shape)
    rad = np.zeros(shape)
    best_sdf = np.full(shape, np.inf)
    best_score = np.zeros(shape)
    owner = np.full(shape, -1)
    nearest = np.full(shape, -1)
    normals = np.zeros(shape + (3,))
    normals[..., 2] = 1.0
    for i, p in enumerate(spec.primitives):
        d = p.sdf(x)
        occ = 1 / (1 + np.exp(np.clip(d / tau, -50, 50)))
        m = p.material
        cam = np.maximum(cam, m.camera_alpha * occ)
        rad = np.maximum(rad, m.radar_alpha * occ)
        # owner: the primitive with the strongest radar (then camera) occupancy
        score = np.maximum(m.radar_alpha, 1e-3 * m.camera_alpha) * occ
        take = (score > best_score) & (occ > 1e-6)
        owner = np.where(take, i, owner)
        best_score = np.where(take, score, best_score)
        closer = np.abs(d) < best_sdf
        best_sdf = np.where(closer, np.abs(d), best_sdf)
        nearest = np.where(closer, i, nearest)
    for i, p in enumerate(spec.primitives):
        sel = nearest == i
        if sel.any():
            normals[sel] = p.sdf_normal(x[sel])
    # appearance features extend from the nearest primitive so interpolation stays clean
    src = np.where(owner >= 0, owner, nearest)
    refl = np.zeros(shape)
    color = np.full(shape + (3,), 0.5)
    for i, p in enumerate(spec.primitives):
        sel = src == i
        refl[sel] = p.material.base_reflectance
        color[sel] = p.material.color
    log_refl = np.log(np.maximum(refl, 1e-6))
    color_logit = _logit(np.clip(color, 0.01, 0.99))
    cam_logit = _logit(cam)
    rad_logit = _logit(rad)
    with torch.no_grad():
        cam_feat = np.stack([cam_logit, color_logit[..., 0], color_logit[..., 1], color_logit[..., 2]], 0)
        rad_feat = np.stack([rad_logit, log_refl, np.zeros(shape), np.zeros(shape)], 0)
        for geo, feat in ((scene.camera_geometry, cam_feat), (scene.radar_geometry, rad_feat)):
            geo.grid.levels[0].copy_(torch.as_tensor(feat[None], dtype=torch.float32))
            geo.density_head.weight.zero_()
            geo.density_head.weight[0, 0] = 1.0
            geo.density_head.bias.zero_()
            geo.code_head.weight.zero_()
            geo.code_head.bias.zero_()
            for c in range(4):
                geo.code_head.weight[c, c] = 1.0
        ca = scene.camera_appearance.color_head
        ca.weight.zero_()
        ca.bias.zero_()
        for c in range(3):
            ca.weight[c, 1 + c] = 1.0
        ra = scene.radar_appearance.head
        ra.weight.zero_()
        ra.bias.fill_(-spec.retro_weight)
        ra.weight[0, 1] = 1.0  # log reflectance code channel
        ra.weight[0, scene.radar_appearance.code_dim] = spec.retro_weight  # the single BRDF basis
        scene.normals.grid.levels[0].copy_(torch.as_tensor(np.moveaxis(normals, -1, 0)[None], dtype=torch.float32))
    return BakedScene(scene, spec, resolution, cam, rad, normals, owner)


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    frames: list  # RangeDopplerFrame, noisy ground truth
    clean: list  # np.ndarray cubes without noise
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    normal_maps: np.ndarray  # (N, H, W, 3), zero where nothing was hit
    trajectory: Trajectory  # scaleless (as stored)
    radar: RadarConfig
    intrinsics: CameraIntrinsics
    bounds: tuple  # scaleless scene bounds
    true_scale: float | None  # None when loaded without the sealed answers
    noise: NoiseModel | None
    test_fraction: float = 0.2

    def split(self) -> tuple[list[int], list[int]]:
        """Temporal split: the last ``test_fraction`` of frames are held out."""
        n = len(self.frames)
        n_test = int(round(self.test_fraction * n))
        return list(range(n - n_test)), list(range(n - n_test, n))

    def speeds(self, scale: float | None = None) -> np.ndarray:
        if scale is None:
            scale = self.true_scale if self.true_scale is not None else self.trajectory.scale
        s = scale
        return np.linalg.norm(self.trajectory.velocities, axis=1) * s


def render_gt_frames(scene: SceneField, traj: Trajectory, radar: RadarConfig, batch: int = 4,
                     samples_per_bin: int | None = None) -> list[np.ndarray]:
    """Noise-free cubes for every trajectory frame (metric trajectory, linear sampler)."""
    cfg = replace(radar, sampler="linear", samples_per_bin=samples_per_bin or max(radar.samples_per_bin, 4))
    rots = torch.as_tensor(np.stack([quat_to_matrix(q) for q in traj.rotations]), dtype=torch.float32)
    pos = torch.tensor(np.array(traj.positions), dtype=torch.float32)
    vel = torch.tensor(np.array(traj.velocities), dtype=torch.float32)
    out = []
    with torch.no_grad():
        for i in range(0, len(traj), batch):
            cube, _ = render_radar_frames(scene, rots[i:i + batch], pos[i:i + batch], vel[i:i + batch],
                                          traj.scale, cfg)
            out.extend(c.clamp_min(0).numpy() for c in cube)
    return out


def render_gt_images(scene: SceneField, traj: Trajectory, intr: CameraIntrinsics):
    imgs, norms = [], []
    with torch.no_grad():
        for q, p in zip(traj.rotations, traj.positions):
            rot = torch.as_tensor(quat_to_matrix(q), dtype=torch.float32)
            o, d = camera_rays_for_pose(rot, torch.tensor(np.array(p), dtype=torch.float32), intr)
            out = render_camera_rays(scene, o, d, with_normals=True)
            n = (out.weights[..., None] * out.normals).sum(1)
            n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-8)
            n = torch.where(out.opacity[:, None] > 0.5, n, torch.zeros_like(n))
            imgs.append(out.rgb.reshape(intr.height, intr.width, 3).numpy())
            norms.append(n.reshape(intr.height, intr.width, 3).numpy())
    return np.stack(imgs), np.stack(norms)


def generate_dataset(scene: SceneSpec, traj: TrajectorySpec, radar: RadarConfig,
                     intrinsics: CameraIntrinsics = CameraIntrinsics(), seed: int = 0, true_scale: float = 1.0,
                     noise_dof: float = 4.0, noise_level: float = 2e-4, resolution: int = 64,
                     baked: BakedScene | None = None) -> Dataset:
    """Ground-truth frames (with additive chi-square noise) and images, trajectory stored scaleless.

    ``noise_level`` sets the noise scale relative to the 99.99th percentile of
    the clean cubes; 0 disables noise.
    """
    baked = baked or bake_scene(scene, resolution, radar)
    metric = make_trajectory(traj)
    clean = render_gt_frames(baked.field, metric, radar)
    imgs, norms = render_gt_images(baked.field, metric, intrinsics)
    rng = np.random.default_rng(seed)
    noise = None
    if noise_level > 0:
        ref = float(np.percentile(np.concatenate([c.ravel() for c in clean]), 99.99))
        noise = NoiseModel.from_params(noise_dof, noise_level * max(ref, 1e-12))
    frames = []
    for t, c in zip(metric.timestamps, clean):
        cube = c + noise.sample(c.shape, rng) if noise is not None else c
        frames.append(RangeDopplerFrame(float(t), cube.astype(np.float32)))
    lo, hi = (np.asarray(b, dtype=np.float64) / true_scale for b in scene.bounds)
    return Dataset(frames, clean, imgs, norms, scaleless(metric, true_scale), radar, intrinsics,
                   (tuple(lo.tolist()), tuple(hi.tolist())), float(true_scale), noise)


def scale_spec(spec: SceneSpec, s: float) -> SceneSpec:
    """The same scene expressed in units multiplied by ``s`` (used to build metric scenes)."""
    prims = []
    for p in spec.primitives:
        size = tuple(v * s for v in p.size)
        prims.append(replace(p, center=tuple(v * s for v in p.center), size=size, shell=p.shell * s))
    b = tuple(tuple(v * s for v in bb) for bb in spec.bounds)
    return replace(spec, primitives=tuple(prims), bounds=b)


# --------------------------------------------------------------------------
# preset scenes


def general_scene(seed: int = 0, roughness: float = 1.0, floor: bool = True) -> SceneSpec:
    """Boxes and spheres of mixed reflectance around the origin, optionally on a floor."""
    rng = np.random.default_rng(seed)
    prims = []
    if floor:
        prims.append(Primitive("plane", (0.0, 0.0, 0.1), normal=(0, 0, 1),
                               material=Material(1.0, 0.4, 0.15, roughness, (0.45, 0.4, 0.35))))
    for k in range(6):
        ang = 2 * np.pi * k / 6 + rng.uniform(-0.3, 0.3)
        r = rng.uniform(0.0, 1.4) if k % 2 else rng.uniform(3.3, 3.7)
        c = (r * np.cos(ang), r * np.sin(ang))
        mat = Material(1.0, 1.0, float(rng.uniform(0.5, 2.0)), roughness, tuple(rng.uniform(0.2, 0.9, 3)))
        if k % 3 == 0:
            rad = float(rng.uniform(0.3, 0.5))
            prims.append(Primitive("sphere", (c[0], c[1], rad + 0.1), (rad,), material=mat))
        else:
            h = tuple(rng.uniform(0.2, 0.45, 2)) + (float(rng.uniform(0.3, 0.7)),)
            prims.append(Primitive("box", (c[0], c[1], h[2] + 0.1), h, yaw=float(rng.uniform(0, np.pi)),
                                   material=mat))
    return SceneSpec(tuple(prims))


def retro_plates_scene(roughness: float = 0.1, retro_weight: float = 4.0, seed: int = 0) -> SceneSpec:
    """Thin flat plates at assorted orientations: strongly retroreflective returns."""
    rng = np.random.default_rng(seed)
    prims = []
    for k in range(7):
        ang = 2 * np.pi * k / 7
        r = 1.0 if k % 2 else 3.4
        c = (r * np.cos(ang), r * np.sin(ang), 1.0 + rng.uniform(-0.2, 0.2))
        mat = Material(1.0, 1.0, float(rng.uniform(1.0, 2.0)), roughness, tuple(rng.uniform(0.2, 0.9, 3)))
        prims.append(Primitive("box", c, (0.1, 0.45, 0.4), yaw=float(rng.uniform(0, np.pi)), material=mat))
    return SceneSpec(tuple(prims), retro_weight=retro_weight)


def tent_scene(roughness: float = 1.0) -> SceneSpec:
    """A cloth tent (camera-opaque, radar-transparent walls) around a radar-bright target.

    Three 0.3 m walls and a roof; the +y side is open, so the interior is seen
    directly from part of an orbit and only through cloth from the rest.
    Primitives 0-3 are cloth, 4 is the target.
    """
    cloth = Material(0.95, 0.05, 0.3, roughness, (0.2, 0.5, 0.25))
    target = Material(1.0, 1.0, 2.0, roughness, (0.8, 0.6, 0.5))
    post = Material(1.0, 1.0, 1.0, roughness, (0.3, 0.3, 0.7))
    prims = (
        Primitive("box", (-0.8, 0.0, 0.8), (0.15, 0.95, 0.7), material=cloth),
        Primitive("box", (0.8, 0.0, 0.8), (0.15, 0.95, 0.7), material=cloth),
        Primitive("box", (0.0, -0.8, 0.8), (0.95, 0.15, 0.7), material=cloth),
        Primitive("box", (0.0, 0.0, 1.5), (0.95, 0.95, 0.15), material=cloth),
        Primitive("box", (0.0, 0.0, 0.6), (0.22, 0.22, 0.45), material=target),
        Primitive("box", (2.6, 1.2, 0.6), (0.25, 0.25, 0.5), yaw=0.4, material=post),
        Primitive("sphere", (-2.4, -1.6, 0.5), (0.4,), material=post),
    )
    return SceneSpec(prims)


def point_targets_scene(range_m: float = 3.0, separation_deg: float = 5.0, radius: float = 0.06,
                        bounds=((-1.0, -2.0, -0.5), (5.0, 2.0, 0.5))) -> SceneSpec:
    """Two small reflectors at equal range, ``separation_deg`` apart in azimuth, seen from the origin."""
    half = math.radians(separation_deg) / 2
    mat = Material(1.0, 1.0, 1.0, 1.0)
    prims = tuple(
        Primitive("sphere", (range_m * math.cos(a), range_m * math.sin(a), 0.0), (radius,), material=mat)
        for a in (-half, half)
    )
    return SceneSpec(prims, bounds=bounds, retro_weight=0.0)

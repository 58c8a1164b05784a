"""Differentiable radar range-Doppler, range-azimuth and camera rendering.

Radar returns along a ray are composited per range bin: samples falling in the
same bin are averaged (occupancy and reflectance separately), then

    C_i = g_k / r_i^2 * c_i * a_i * prod_{j<i} (1 - a_j)^2

and a range-Doppler pixel integrates C over the Doppler circle with the
``r_i / |v|`` bin-width factor.  The field lives in the (scaleless) frame of
the trajectory; a metric distance ``t`` along a ray maps to ``t / scale``
field units.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .field import GeometryField, SceneField
from .geometry import MIN_SPEED, EmptyIntersection, Pose, build_doppler_circle, quat_to_matrix
from .proposal import proposal_sample, render_weights

DEPTH_SENTINEL = -1.0


# --------------------------------------------------------------------------
# configuration and containers


@dataclass(frozen=True)
class RadarConfig:
    n_range: int = 128
    n_doppler: int = 128
    n_antenna: int = 8
    range_resolution: float = 0.05  # m per bin
    doppler_resolution: float = 0.02  # (m/s) per bin
    samples_per_ray: int = 64  # proposal sampler
    samples_per_bin: int = 2  # linear sampler
    circle_samples: int = 64
    sampler: str = "proposal"
    azimuth_fov: float = 120.0  # degrees, spanned by the antenna beams
    beam_width_az: float | None = None  # degrees (Gaussian sigma); default: 0.6 x beam spacing
    beam_width_el: float | None = 20.0  # degrees
    gain_cutoff: float = 1e-4  # rays whose nominal beam pattern is below this are skipped

    def __post_init__(self):
        for name in ("n_range", "n_doppler", "n_antenna", "samples_per_ray", "samples_per_bin", "circle_samples"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.range_resolution <= 0 or self.doppler_resolution <= 0:
            raise ValueError("resolutions must be positive")
        if self.sampler not in ("proposal", "linear"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    @property
    def max_range(self) -> float:
        return self.n_range * self.range_resolution

    def ranges(self, dtype=torch.float32) -> torch.Tensor:
        """Nominal range of each bin (bin centre)."""
        return (torch.arange(self.n_range, dtype=dtype) + 0.5) * self.range_resolution

    def dopplers(self, dtype=torch.float32) -> torch.Tensor:
        return (torch.arange(self.n_doppler, dtype=dtype) - self.n_doppler // 2) * self.doppler_resolution

    def beam_azimuths(self) -> list[float]:
        """Antenna beam centres (radians), one per equal azimuth sector of the FOV."""
        fov = math.radians(self.azimuth_fov)
        step = fov / self.n_antenna
        return [float(-fov / 2 + (k + 0.5) * step) for k in range(self.n_antenna)]

    def gain_kwargs(self) -> dict:
        step = math.radians(self.azimuth_fov) / self.n_antenna
        w_az = math.radians(self.beam_width_az) if self.beam_width_az else 0.6 * step
        w_el = math.radians(self.beam_width_el) if self.beam_width_el else None
        return dict(n_antenna=self.n_antenna, beam_azimuths=tuple(self.beam_azimuths()),
                    beam_width_az=w_az, beam_width_el=w_el)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RadarConfig":
        return cls(**d)


@dataclass
class RangeDopplerFrame:
    timestamp: float
    cube: np.ndarray  # (n_range, n_doppler, n_antenna)
    mask: np.ndarray | None = None
    skipped: bool = False

    def __post_init__(self):
        self.cube = np.asarray(self.cube, dtype=np.float32)
        if self.cube.ndim != 3:
            raise ValueError("cube must be (range, doppler, antenna)")
        if np.any(self.cube < 0):
            raise ValueError("amplitudes must be non-negative")
        if self.mask is None:
            self.mask = np.ones(self.cube.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.cube.shape:
            raise ValueError("mask shape must match cube shape")


@dataclass
class RaySampleSet:
    """Per-ray sorted sample distances (metric) with their field values."""

    t: torch.Tensor  # (R, S)
    alpha: torch.Tensor | None = None  # (R, S)
    reflectance: torch.Tensor | None = None  # (R, S)
    bins: torch.Tensor | None = None  # (R, S) long, -1 = discarded
    histograms: list | None = None  # proposal histograms (edges, weights), metric distances
    points: torch.Tensor | None = None  # (R, S, 3) field coordinates, detached

    def __post_init__(self):
        if self.t.dim() != 2:
            raise ValueError("t must be (rays, samples)")
        if self.t.shape[1] > 1 and bool((self.t[:, 1:] < self.t[:, :-1]).any()):
            raise ValueError("sample distances must be sorted")


# --------------------------------------------------------------------------
# gradient tape


class GradientTape:
    """Flat gradient of a scalar loss over a fixed, ordered parameter list."""

    def __init__(self, parameters: Sequence[torch.Tensor]):
        self.parameters = [p for p in parameters if p.requires_grad]
        self.size = sum(p.numel() for p in self.parameters)
        self.gradient = torch.zeros(self.size, dtype=torch.float64)
        self.loss: float | None = None
        self._used = False

    def reset(self) -> None:
        self.gradient.zero_()
        self.loss = None
        self._used = False

    def vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1).to(torch.float64) for p in self.parameters])


def backward(tape: GradientTape, loss: torch.Tensor) -> torch.Tensor:
    """Reverse-mode gradient of ``loss`` w.r.t. every tape parameter, flattened."""
    if tape._used:
        raise RuntimeError("gradient tape already used; call reset() first")
    grads = torch.autograd.grad(loss, tape.parameters, allow_unused=True)
    flat = [
        (torch.zeros(p.numel(), dtype=torch.float64) if g is None else g.reshape(-1).to(torch.float64))
        for p, g in zip(tape.parameters, grads)
    ]
    tape.gradient = torch.cat(flat) if flat else torch.zeros(0, dtype=torch.float64)
    tape.loss = float(loss.detach())
    tape._used = True
    return tape.gradient


# --------------------------------------------------------------------------
# ray/box helpers


def ray_box(origins: torch.Tensor, directions: torch.Tensor, bounds: torch.Tensor):
    """Entry/exit distances of rays ``o + t d`` against an axis-aligned box (t >= 0)."""
    lo = bounds[0].to(origins.dtype)
    hi = bounds[1].to(origins.dtype)
    d = torch.where(directions.abs() < 1e-12, torch.full_like(directions, 1e-12), directions)
    t0 = (lo - origins) / d
    t1 = (hi - origins) / d
    near = torch.minimum(t0, t1).amax(-1).clamp_min(0.0)
    far = torch.maximum(t0, t1).amin(-1)
    far = torch.maximum(far, near)
    return near, far


# --------------------------------------------------------------------------
# radar compositing


def aggregate_bins(t: torch.Tensor, alpha: torch.Tensor, reflectance: torch.Tensor,
                   range_resolution: float, n_range: int, valid: torch.Tensor | None = None):
    """Per-bin mean occupancy and reflectance; bins without samples get zero.

    Returns (mean_alpha, mean_reflectance, counts), each (R, n_range).
    """
    R, S = t.shape
    bins = torch.floor(t.detach() / range_resolution).long()
    ok = (bins >= 0) & (bins < n_range)
    if valid is not None:
        ok = ok & valid
    flat = torch.where(ok, bins + n_range * torch.arange(R)[:, None], torch.full_like(bins, R * n_range))
    flat = flat.reshape(-1)
    zeros = alpha.new_zeros(R * n_range + 1)
    counts = zeros.index_add(0, flat, torch.ones_like(alpha.reshape(-1)))
    sa = zeros.index_add(0, flat, alpha.reshape(-1))
    sc = zeros.index_add(0, flat, reflectance.reshape(-1))
    counts = counts[:-1].reshape(R, n_range)
    denom = counts.clamp_min(1.0)
    return sa[:-1].reshape(R, n_range) / denom, sc[:-1].reshape(R, n_range) / denom, counts


def composite_bins(mean_alpha: torch.Tensor, mean_reflectance: torch.Tensor, ranges: torch.Tensor):
    """Per-bin amplitude a_i c_i prod_{j<i} (1 - a_j)^2 / r_i^2 (unit gain) and radar weights."""
    one_minus = 1 - mean_alpha
    trans = torch.cumprod(torch.cat([torch.ones_like(one_minus[..., :1]), one_minus[..., :-1]], -1), -1)
    amp = mean_alpha * mean_reflectance * trans**2 / ranges.to(mean_alpha.dtype) ** 2
    return amp, mean_alpha * trans


def radar_samples(scene: SceneField, origins: torch.Tensor, directions: torch.Tensor, scale,
                  config: RadarConfig, generator: torch.Generator | None = None,
                  sampler: str | None = None) -> RaySampleSet:
    """Metric sample distances along radar rays.

    ``linear`` places ``samples_per_bin`` stratified samples in every range bin;
    ``proposal`` draws ``samples_per_ray`` from the proposal field between the
    ray's entry and exit of the scene box.  Without a generator the strata are
    sampled at their midpoints (deterministic).
    """
    sampler = sampler or config.sampler
    R = origins.shape[0]
    dt = origins.dtype
    if sampler == "linear":
        spb = config.samples_per_bin
        base = torch.arange(config.n_range * spb, dtype=dt)
        if generator is None:
            u = torch.full((R, base.numel()), 0.5, dtype=dt)
        else:
            u = torch.rand((R, base.numel()), generator=generator).to(dt)
        t = (base[None, :] + u) * (config.range_resolution / spb)
        return RaySampleSet(t)
    s = torch.as_tensor(scale, dtype=dt).detach()
    near, far = ray_box(origins.detach(), directions.detach() / s, scene.bounds)
    near = near.clamp(max=config.max_range)
    far = far.clamp(max=config.max_range)
    ps = proposal_sample(scene.proposal, origins, directions, near, far, config.samples_per_ray,
                         generator, step_scale=1.0 / s)
    return RaySampleSet(ps.t, histograms=ps.histograms)


@dataclass
class RadarRays:
    amplitude: torch.Tensor  # (R, n_range), unit gain
    weights: torch.Tensor  # (R, n_range), a_i prod_{j<i} (1 - a_j)
    mean_alpha: torch.Tensor
    samples: RaySampleSet


def render_radar_rays(scene: SceneField, origins: torch.Tensor, directions: torch.Tensor, scale,
                      config: RadarConfig, samples: RaySampleSet | None = None,
                      generator: torch.Generator | None = None, geometry: GeometryField | None = None,
                      unit_reflectance: bool = False, sampler: str | None = None) -> RadarRays:
    """Unit-gain per-bin amplitudes of radar rays.

    origins: (R, 3) in field coordinates; directions: (R, 3) unit, world frame;
    ``scale`` converts field units to metres.
    """
    geometry = scene.radar_geometry if geometry is None else geometry
    if samples is None:
        samples = radar_samples(scene, origins, directions, scale, config, generator, sampler)
    t = samples.t
    R, S = t.shape
    dt = origins.dtype
    s = torch.as_tensor(scale, dtype=dt)
    pts = origins[:, None, :] + (t / s)[..., None] * directions[:, None, :]
    inside = geometry.grid.inside(pts.detach()) & (t < config.max_range)
    flat_idx = inside.reshape(-1).nonzero().squeeze(-1)
    alpha_full = pts.new_zeros(R * S)
    refl_full = pts.new_zeros(R * S)
    if flat_idx.numel():
        x = pts.reshape(-1, 3)[flat_idx]
        alpha, code = geometry(x)
        alpha_full = alpha_full.index_copy(0, flat_idx, alpha)
        if unit_reflectance:
            refl_full = refl_full.index_copy(0, flat_idx, torch.ones_like(alpha))
        else:
            omega = directions[:, None, :].expand(R, S, 3).reshape(-1, 3)[flat_idx]
            n = scene.normals(x)
            c = scene.radar_appearance(code, omega, n)
            refl_full = refl_full.index_copy(0, flat_idx, c)
    alpha_full = alpha_full.reshape(R, S)
    refl_full = refl_full.reshape(R, S)
    ranges = config.ranges(dt)
    mean_a, mean_c, _ = aggregate_bins(t, alpha_full, refl_full, config.range_resolution, config.n_range,
                                       valid=t < config.max_range)
    amp, w = composite_bins(mean_a, mean_c, ranges)
    bins = torch.floor(t.detach() / config.range_resolution).long()
    bins = torch.where(bins < config.n_range, bins, torch.full_like(bins, -1))
    samples.alpha, samples.reflectance, samples.bins = alpha_full, refl_full, bins
    samples.points = pts.detach()
    return RadarRays(amp, w, mean_a, samples)


def render_amplitude_along_ray(scene: SceneField, origin, omega, samples, k: int | None = None,
                               config: RadarConfig = RadarConfig(), rotation=None, scale=1.0) -> torch.Tensor:
    """Per-range-bin amplitudes along one ray (antenna ``k``; unit gain when ``k`` is None)."""
    dt = scene.radar_geometry.density_head.weight.dtype
    o = torch.as_tensor(origin, dtype=dt).reshape(1, 3)
    w = torch.as_tensor(omega, dtype=dt).reshape(1, 3)
    if not isinstance(samples, RaySampleSet):
        samples = RaySampleSet(torch.as_tensor(samples, dtype=dt).reshape(1, -1))
    out = render_radar_rays(scene, o, w, scale, config, samples=samples).amplitude[0]
    if k is None:
        return out
    rot = torch.eye(3, dtype=dt) if rotation is None else torch.as_tensor(rotation, dtype=dt)
    g = scene.gains((rot.T @ w[0]).reshape(1, 3))[0, k]
    return g * out


# --------------------------------------------------------------------------
# range-Doppler frames


def _circle_directions(velocity: torch.Tensor, cos_theta: torch.Tensor, n: int, phase: torch.Tensor) -> torch.Tensor:
    speed = velocity.norm(dim=-1, keepdim=True)
    axis = velocity / speed
    use_x = (axis[:, 2].abs() >= 0.9).detach()
    helper = torch.zeros_like(axis)
    helper[:, 2] = (~use_x).to(axis.dtype)
    helper[:, 0] = use_x.to(axis.dtype)
    e1 = torch.linalg.cross(helper, axis)
    e1 = e1 / e1.norm(dim=-1, keepdim=True)
    e2 = torch.linalg.cross(axis, e1)
    sin_t = (1 - cos_theta * cos_theta).clamp_min(1e-12).sqrt()
    phi = phase[:, None] + 2 * math.pi * torch.arange(n, dtype=velocity.dtype) / n
    ring = torch.cos(phi)[..., None] * e1[:, None, :] + torch.sin(phi)[..., None] * e2[:, None, :]
    return cos_theta[:, None, None] * axis[:, None, :] + sin_t[:, None, None] * ring


def render_radar_frames(scene: SceneField, rotations: torch.Tensor, positions: torch.Tensor,
                        velocities: torch.Tensor, scale, config: RadarConfig,
                        generator: torch.Generator | None = None, geometry: GeometryField | None = None,
                        unit_reflectance: bool = False, nominal_gain: bool = False,
                        sampler: str | None = None, return_rays: bool = False):
    """Batched range-Doppler cubes.

    rotations (F, 3, 3) sensor-to-world; positions (F, 3) field coordinates;
    velocities (F, 3) metric, world frame.  Returns cubes (F, n_range,
    n_doppler, n_antenna) and a boolean (F,) skipped marker.  With a generator
    the circle phase and sample strata are jittered.
    """
    dt = positions.dtype
    F_ = positions.shape[0]
    K = config.n_antenna
    cube = positions.new_zeros(F_, config.n_doppler, config.n_range, K)
    speed = velocities.norm(dim=-1)
    skipped = speed.detach() < MIN_SPEED
    d = config.dopplers(dt)
    valid = (d[None, :].abs() <= speed.detach()[:, None]) & ~skipped[:, None]
    fi, ji = valid.nonzero(as_tuple=True)
    if fi.numel() == 0:
        out = cube.permute(0, 2, 1, 3)
        return (out, skipped, None) if return_rays else (out, skipped)
    n = config.circle_samples
    cos_t = (d[ji] / speed[fi]).clamp(-1.0, 1.0)
    if generator is None:
        phase = torch.zeros(fi.numel(), dtype=dt)
    else:
        phase = torch.rand(fi.numel(), generator=generator).to(dt) * (2 * math.pi / n)
    dirs = _circle_directions(velocities[fi], cos_t, n, phase)  # (P, n, 3)
    rot = rotations[fi]  # (P, 3, 3)
    omega_s = torch.einsum("pba,pnb->pna", rot, dirs)  # R^T w
    az = torch.atan2(omega_s[..., 1], omega_s[..., 0])
    el = torch.asin(omega_s[..., 2].clamp(-1, 1))
    with torch.no_grad():
        keep = scene.gains.pattern(az, el).amax(-1) >= config.gain_cutoff  # (P, n)
    pi, ni = keep.nonzero(as_tuple=True)
    if pi.numel() == 0:
        out = cube.permute(0, 2, 1, 3)
        return (out, skipped, None) if return_rays else (out, skipped)
    origins = positions[fi][pi]
    rays = render_radar_rays(scene, origins, dirs[pi, ni], scale, config, generator=generator,
                             geometry=geometry, unit_reflectance=unit_reflectance, sampler=sampler)
    if nominal_gain:
        g = scene.gains.pattern(az[pi, ni], el[pi, ni])
    else:
        g = scene.gains(omega_s[pi, ni])  # (Rk, K)
    contrib = rays.amplitude[:, :, None] * g[:, None, :]  # (Rk, n_range, K)
    col = contrib.new_zeros(fi.numel(), config.n_range, K).index_add(0, pi, contrib)
    ranges = config.ranges(dt)
    col = col * (ranges[None, :, None] / speed[fi][:, None, None]) / n
    cube = cube.index_put((fi, ji), col)
    out = cube.permute(0, 2, 1, 3)
    if return_rays:
        return out, skipped, rays
    return out, skipped


def _pose_tensors(pose: Pose, velocity, dt):
    rot = torch.as_tensor(quat_to_matrix(pose.rotation), dtype=dt)[None]
    pos = torch.tensor(np.array(pose.position, dtype=np.float64), dtype=dt)[None]
    vel = torch.as_tensor(np.asarray(velocity, dtype=np.float64), dtype=dt)[None]
    return rot, pos, vel


def render_frame(scene: SceneField, pose: Pose, velocity, config: RadarConfig, scale=1.0,
                 sampler: str | None = None) -> RangeDopplerFrame:
    dt = scene.radar_geometry.density_head.weight.dtype
    rot, pos, vel = _pose_tensors(pose, velocity, dt)
    with torch.no_grad():
        cube, skipped = render_radar_frames(scene, rot, pos, vel, scale, config, sampler=sampler)
    return RangeDopplerFrame(pose.timestamp, cube[0].clamp_min(0).cpu().numpy(), skipped=bool(skipped[0]))


def render_doppler_column(scene: SceneField, pose: Pose, velocity, d_j: float, k: int,
                          config: RadarConfig, scale=1.0, sampler: str | None = None) -> torch.Tensor:
    """n_range amplitudes of one Doppler column for antenna ``k``, via an explicit Doppler circle."""
    dt = scene.radar_geometry.density_head.weight.dtype
    try:
        circle = build_doppler_circle(pose, velocity, 1.0, d_j, config.circle_samples)
    except EmptyIntersection:
        return torch.zeros(config.n_range, dtype=dt)
    dirs = torch.as_tensor(circle.directions, dtype=dt)
    if len(dirs) == 1:
        dirs = dirs.expand(config.circle_samples, 3)
    rot = torch.as_tensor(quat_to_matrix(pose.rotation), dtype=dt)
    origins = torch.tensor(np.array(pose.position), dtype=dt).expand(len(dirs), 3)
    rays = render_radar_rays(scene, origins, dirs, scale, config, sampler=sampler)
    g = scene.gains(dirs @ rot)[:, k]
    speed = float(np.linalg.norm(velocity))
    return (rays.amplitude * g[:, None]).sum(0) * config.ranges(dt) / speed / len(dirs)


# --------------------------------------------------------------------------
# range-azimuth


def render_range_azimuth(scene: SceneField, pose: Pose, n_azimuth: int, config: RadarConfig,
                         scale=1.0, fov: float | None = None, rays_per_map: int = 256,
                         elevation: float = 0.0, sampler: str = "linear") -> torch.Tensor:
    """Unit-gain range profiles over ``n_azimuth`` equal sectors of the FOV.

    Each sector is the mean of evenly spaced sub-rays across its width, so a
    coarse map integrates its wedge rather than sampling a single direction.
    Returns (n_range, n_azimuth).
    """
    if n_azimuth < 1:
        raise ValueError("n_azimuth must be >= 1")
    dt = scene.radar_geometry.density_head.weight.dtype
    fov = math.radians(config.azimuth_fov if fov is None else fov)
    sub = max(1, math.ceil(rays_per_map / n_azimuth))
    width = fov / n_azimuth
    centres = -fov / 2 + (torch.arange(n_azimuth, dtype=dt) + 0.5) * width
    offs = (torch.arange(sub, dtype=dt) + 0.5) / sub - 0.5
    az = (centres[:, None] + offs[None, :] * width).reshape(-1)
    el = torch.full_like(az, elevation)
    local = torch.stack([torch.cos(az) * torch.cos(el), torch.sin(az) * torch.cos(el), torch.sin(el)], -1)
    rot = torch.as_tensor(quat_to_matrix(pose.rotation), dtype=dt)
    dirs = local @ rot.T
    origins = torch.tensor(np.array(pose.position), dtype=dt).expand_as(dirs)
    with torch.no_grad():
        rays = render_radar_rays(scene, origins, dirs, scale, config, sampler=sampler)
    return rays.amplitude.reshape(n_azimuth, sub, config.n_range).mean(1).T


# --------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 32
    height: int = 24
    fov: float = 90.0  # horizontal, degrees

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(self.fov) / 2)

    def directions(self, dtype=torch.float32) -> torch.Tensor:
        """Unit sensor-frame ray directions (H*W, 3); x forward, y left, z up."""
        v, u = torch.meshgrid(torch.arange(self.height, dtype=dtype) + 0.5,
                              torch.arange(self.width, dtype=dtype) + 0.5, indexing="ij")
        f = self.focal
        d = torch.stack([torch.ones_like(u), -(u - self.width / 2) / f, -(v - self.height / 2) / f], -1)
        return (d / d.norm(dim=-1, keepdim=True)).reshape(-1, 3)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CameraRays:
    rgb: torch.Tensor  # (R, 3)
    depth: torch.Tensor  # (R,), DEPTH_SENTINEL where nothing was hit
    opacity: torch.Tensor  # (R,)
    weights: torch.Tensor  # (R, S)
    t: torch.Tensor  # (R, S)
    edges: torch.Tensor  # (R, S + 1)
    points: torch.Tensor  # (R, S, 3)
    alpha: torch.Tensor  # (R, S)
    normals: torch.Tensor | None = None  # (R, S, 3) per-sample predicted normals


def composite_camera(alpha: torch.Tensor, color: torch.Tensor, t: torch.Tensor, min_opacity: float = 1e-3):
    """Front-to-back alpha compositing: (rgb, depth, opacity, weights)."""
    w = render_weights(alpha)
    acc = w.sum(-1)
    rgb = (w[..., None] * color).sum(-2)
    depth = (w * t).sum(-1) / acc.clamp_min(1e-12)
    depth = torch.where(acc > min_opacity, depth, torch.full_like(depth, DEPTH_SENTINEL))
    return rgb, depth, acc, w


def camera_samples(origins: torch.Tensor, directions: torch.Tensor, bounds: torch.Tensor, step: float,
                   n_samples: int, generator: torch.Generator | None = None):
    """Evenly stepped samples from the box entry point; returns (t, edges, valid)."""
    near, far = ray_box(origins, directions, bounds)
    R = origins.shape[0]
    k = torch.arange(n_samples + 1, dtype=origins.dtype)
    if generator is None:
        u = torch.full((R, n_samples), 0.5, dtype=origins.dtype)
    else:
        u = torch.rand((R, n_samples), generator=generator).to(origins.dtype)
    edges = near[:, None] + k[None, :] * step
    t = edges[:, :-1] + u * step
    valid = t < far[:, None]
    return t, edges, valid


def render_camera_rays(scene: SceneField, origins: torch.Tensor, directions: torch.Tensor,
                       step: float | None = None, n_samples: int | None = None,
                       generator: torch.Generator | None = None, geometry: GeometryField | None = None,
                       with_color: bool = True, with_normals: bool = False) -> CameraRays:
    """Alpha-composited colour and depth along camera rays (field coordinates)."""
    geometry = scene.camera_geometry if geometry is None else geometry
    bounds = scene.bounds
    ext = (bounds[1] - bounds[0]).to(origins.dtype)
    if step is None:
        step = float(ext.max()) / max(geometry.grid.resolutions)
    if n_samples is None:
        n_samples = int(math.ceil(float(ext.norm()) / step)) + 1
    t, edges, valid = camera_samples(origins, directions, bounds, step, n_samples, generator)
    R, S = t.shape
    pts = origins[:, None, :] + t[..., None] * directions[:, None, :]
    inside = geometry.grid.inside(pts.detach()) & valid
    flat_idx = inside.reshape(-1).nonzero().squeeze(-1)
    alpha = pts.new_zeros(R * S)
    color = pts.new_zeros(R * S, 3)
    normals = None
    if flat_idx.numel():
        x = pts.reshape(-1, 3)[flat_idx]
        a, code = geometry(x)
        alpha = alpha.index_copy(0, flat_idx, a)
        if with_color:
            omega = directions[:, None, :].expand(R, S, 3).reshape(-1, 3)[flat_idx]
            color = color.index_copy(0, flat_idx, scene.camera_appearance(code, omega))
        if with_normals:
            normals = pts.new_zeros(R * S, 3).index_copy(0, flat_idx, scene.normals(x)).reshape(R, S, 3)
    alpha = alpha.reshape(R, S)
    rgb, depth, acc, w = composite_camera(alpha, color.reshape(R, S, 3), t)
    return CameraRays(rgb, depth, acc, w, t, edges, pts, alpha, normals)


def camera_rays_for_pose(rotation: torch.Tensor, position: torch.Tensor, intrinsics: CameraIntrinsics):
    d = intrinsics.directions(position.dtype) @ rotation.T
    return position.expand_as(d), d


def render_camera(scene: SceneField, pose: Pose, intrinsics: CameraIntrinsics, geometry: GeometryField | None = None,
                  step: float | None = None):
    """RGB (H, W, 3) and depth (H, W) images from a pose; depth is DEPTH_SENTINEL where empty."""
    dt = scene.camera_geometry.density_head.weight.dtype
    rot = torch.as_tensor(quat_to_matrix(pose.rotation), dtype=dt)
    pos = torch.tensor(np.array(pose.position), dtype=dt)
    o, d = camera_rays_for_pose(rot, pos, intrinsics)
    with torch.no_grad():
        out = render_camera_rays(scene, o, d, step=step, geometry=geometry)
    H, W = intrinsics.height, intrinsics.width
    return out.rgb.reshape(H, W, 3), out.depth.reshape(H, W)

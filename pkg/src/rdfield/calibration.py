"""Metric scale recovery from range-Doppler structure, and pose-offset refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from scipy import optimize

from .field import GeometryField, SceneField
from .geometry import Trajectory, TrajectoryParams
from .losses import LossWeights, pose_regularizers
from .metrics import ssim_map
from .optim import Adam, LRSchedule
from .renderer import RadarConfig, render_radar_frames


class FailedCalibration(RuntimeError):
    pass


@dataclass(frozen=True)
class ScaleParam:
    s: float = 1.0
    s_min: float = 0.05
    s_max: float = 20.0

    def __post_init__(self):
        if not (0 < self.s_min <= self.s <= self.s_max):
            raise ValueError("need 0 < s_min <= s <= s_max")


@dataclass
class CalibrationResult:
    s_init: float
    s_opt: float
    curve: list = field(default_factory=list)  # [(s, objective)] in evaluation order

    def to_dict(self) -> dict:
        return {"s_init": self.s_init, "s_opt": self.s_opt,
                "objective_curve": [[float(s), float(v)] for s, v in self.curve]}


def apply_scale(traj: Trajectory, s: float) -> Trajectory:
    """Positions and velocities (and their offsets) multiplied by ``s``."""
    if not s > 0:
        raise ValueError("scale must be positive")
    off = np.array(traj.pose_offsets)
    off[:, 0:3] *= s
    off[:, 6:9] *= s
    return Trajectory(traj.timestamps, traj.rotations, np.array(traj.positions) * s,
                      np.array(traj.velocities) * s, traj.scale, off)


def even_subsample(n: int, k: int) -> list[int]:
    if n <= k:
        return list(range(n))
    return sorted({int(round(x)) for x in np.linspace(0, n - 1, k)})


class ScaleObjective:
    """Mean (1 - SSIM) between frames rendered from camera occupancy at scale ``s`` and recorded frames.

    Rendering uses unit reflectance and the nominal antenna pattern; each
    image set is normalised by its own 99.99th percentile, so the objective
    does not depend on the global amplitude of either side. The SSIM map is
    averaged only where either image exceeds ``structure`` (in normalised
    units): radar frames are mostly empty, and an unmasked mean rewards
    candidate scales that push all returns out of the frame.
    """

    def __init__(self, scene: SceneField, traj: Trajectory, cubes: Sequence[np.ndarray], radar: RadarConfig,
                 idx: Sequence[int], geometry: GeometryField | None = None, batch: int = 8,
                 structure: float = 1e-2):
        self.scene = scene
        self.geometry = scene.camera_geometry if geometry is None else geometry
        self.radar = replace(radar, sampler="linear")
        self.idx = list(idx)
        params = TrajectoryParams(traj)
        sel = torch.as_tensor(self.idx)
        self.rot = params.rotations(sel).detach()
        self.pos = params.positions(sel).detach()
        self.vel = (params.base_velocities[sel] + params.offsets[sel, 6:9]).detach()  # scaleless
        gt = torch.tensor(np.stack([np.asarray(cubes[i]) for i in self.idx]), dtype=torch.float32)
        self.gt = self._normalise(gt)
        self.batch = batch
        self.structure = structure
        self.calls = 0

    @staticmethod
    def _normalise(c: torch.Tensor) -> torch.Tensor:
        hi = torch.quantile(c.reshape(-1)[:: max(1, c.numel() // 2_000_000)], 0.9999)
        return (c / hi.clamp_min(1e-20)).clamp(0, 1)

    def render(self, s: float) -> torch.Tensor:
        out = []
        with torch.no_grad():
            for i in range(0, len(self.idx), self.batch):
                sl = slice(i, i + self.batch)
                cube, _ = render_radar_frames(self.scene, self.rot[sl], self.pos[sl], s * self.vel[sl], s,
                                              self.radar, geometry=self.geometry, unit_reflectance=True,
                                              nominal_gain=True)
                out.append(cube)
        return torch.cat(out)

    def __call__(self, s: float) -> float:
        self.calls += 1
        pred = self._normalise(self.render(float(s)))
        a = self.gt.permute(0, 3, 1, 2).double()
        b = pred.permute(0, 3, 1, 2).double()
        mask = (a > self.structure) | (b > self.structure)
        if not mask.any():
            return 1.0
        return float(1 - ssim_map(a, b)[mask].mean())


def optimize_scale(scene: SceneField, traj: Trajectory, cubes: Sequence[np.ndarray], radar: RadarConfig,
                   param: ScaleParam = ScaleParam(), n_frames: int = 32, n_coarse: int = 33, rtol: float = 1e-3,
                   geometry: GeometryField | None = None) -> CalibrationResult:
    """Coarse log-spaced search over [s_min, s_max], then golden-section refinement of an interior minimum."""
    if len(traj) < 10:
        raise ValueError("scale calibration needs at least 10 frames")
    idx = even_subsample(len(traj), n_frames)
    f = ScaleObjective(scene, traj, cubes, radar, idx, geometry)
    grid = np.geomspace(param.s_min, param.s_max, n_coarse)
    vals = np.array([f(s) for s in grid])
    curve = list(zip(grid.tolist(), vals.tolist()))
    if not np.all(np.isfinite(vals)) or vals.max() - vals.min() < 1e-6:
        raise FailedCalibration("scale objective is flat: no range-Doppler structure to match")
    k = int(np.argmin(vals))
    if k == 0 or k == n_coarse - 1:
        return CalibrationResult(param.s, float(grid[k]), curve)
    seen = {}

    def obj(s):
        if not grid[k - 1] <= s <= grid[k + 1]:
            return 10.0
        v = f(s)
        seen[float(s)] = v
        return v

    res = optimize.minimize_scalar(obj, bracket=(grid[k - 1], grid[k], grid[k + 1]), method="golden",
                                   options={"xtol": rtol})
    s_opt = float(np.clip(res.x, param.s_min, param.s_max))
    curve.extend(sorted(seen.items()))
    best = min([(v, s) for s, v in curve])
    if best[0] < f(s_opt) - 1e-12:
        s_opt = float(best[1])
    return CalibrationResult(param.s, s_opt, curve)


# --------------------------------------------------------------------------
# pose refinement


def refine_poses(traj: TrajectoryParams, weights: LossWeights = LossWeights(), iters: int = 500,
                 lr: float = 1e-3, lr_final: float = 1e-4, window: int = 15) -> list[float]:
    """Optimise the per-frame offsets against the pose regularisers alone; returns the loss curve."""
    opt = Adam({"pose": ([traj.offsets], LRSchedule(lr, lr_final, iters))})
    curve = []
    for _ in range(iters):
        l_p, l_v, l_a, l_k = pose_regularizers(traj, window)
        loss = weights.regp * l_p + weights.regv * l_v + weights.rega * l_a + weights.regk * l_k
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(float(loss))
    return curve

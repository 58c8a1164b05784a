"""Poses, trajectories, Doppler physics and Doppler-circle sample sets.

Conventions used throughout the package:

* quaternions are ``(w, x, y, z)`` and rotate sensor-frame vectors into the world;
* the sensor frame is x forward, y left, z up;
* the Doppler of a static point seen along unit direction ``w`` from a sensor
  moving with velocity ``v`` is ``<w, v>`` (positive for points ahead).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

MIN_SPEED = 1e-4  # m/s; below this a frame carries no usable Doppler


class EmptyIntersection(ValueError):
    """The Doppler cone does not meet the unit sphere (|d| > |v|)."""


class OutOfRange(ValueError):
    pass


# --------------------------------------------------------------------------
# quaternion helpers (numpy)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_from_yaw(yaw: np.ndarray | float) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64)
    z = np.zeros_like(yaw)
    return np.stack([np.cos(yaw / 2), z, z, np.sin(yaw / 2)], axis=-1)


def slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Spherical linear interpolation between unit quaternions, shortest arc."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 0.9999995:
        out = q0 + u * (q1 - q0)
        return out / np.linalg.norm(out)
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    return (math.sin((1 - u) * theta) * q0 + math.sin(u * theta) * q1) / s


# --------------------------------------------------------------------------
# differentiable rotation helpers (torch)


def hat(v: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric matrices for a batch of 3-vectors, shape (..., 3, 3)."""
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack(
        [torch.stack([o, -z, y], -1), torch.stack([z, o, -x], -1), torch.stack([-y, x, o], -1)], -2
    )


def axis_angle_to_matrix(rotvec: torch.Tensor) -> torch.Tensor:
    """Rodrigues map, smooth through zero (Taylor branch for tiny angles)."""
    theta2 = (rotvec * rotvec).sum(-1)
    small = theta2 < 1e-8
    safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = safe.sqrt()
    a = torch.where(small, 1 - theta2 / 6 + theta2 * theta2 / 120, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24 + theta2 * theta2 / 720, (1 - torch.cos(theta)) / safe)
    k = hat(rotvec)
    eye = torch.eye(3, dtype=rotvec.dtype, device=rotvec.device).expand_as(k)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def quat_to_matrix_torch(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


# --------------------------------------------------------------------------
# poses and trajectories


@dataclass(frozen=True)
class Pose:
    timestamp: float
    rotation: np.ndarray  # unit quaternion (w, x, y, z), sensor-to-world
    position: np.ndarray  # meters

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            q = q / n
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)


@dataclass(frozen=True)
class Trajectory:
    """Timestamped poses with per-frame velocities, a metric scale and learnable offsets.

    ``positions`` and ``velocities`` are stored in the trajectory's own
    (possibly scaleless) frame; the metric values are ``scale * (base + offset)``.
    Offsets are ``(N, 9)``: delta position, delta rotation (axis-angle, applied
    on the left of the base rotation), delta velocity.
    """

    timestamps: np.ndarray
    rotations: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    scale: float = 1.0
    pose_offsets: np.ndarray | None = None

    def __post_init__(self):
        t = np.array(self.timestamps, dtype=np.float64).reshape(-1)
        q = quat_normalize(np.array(self.rotations, dtype=np.float64).reshape(-1, 4))
        p = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        v = np.array(self.velocities, dtype=np.float64).reshape(-1, 3)
        n = len(t)
        if not (len(q) == len(p) == len(v) == n):
            raise ValueError("poses, velocities and timestamps must have equal length")
        if n > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        off = self.pose_offsets
        off = np.zeros((n, 9)) if off is None else np.array(off, dtype=np.float64).reshape(n, 9)
        for name, val in [("timestamps", t), ("rotations", q), ("positions", p), ("velocities", v)]:
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        off.setflags(write=False)
        object.__setattr__(self, "pose_offsets", off)
        object.__setattr__(self, "scale", float(self.scale))

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def poses(self) -> list[Pose]:
        return [Pose(t, q, p) for t, q, p in zip(self.timestamps, self.rotations, self.positions)]

    def effective(self) -> "Trajectory":
        """Bake offsets and scale into a metric trajectory with zero offsets."""
        off = self.pose_offsets
        rot = []
        for q, dr in zip(self.rotations, off[:, 3:6]):
            ang = np.linalg.norm(dr)
            dq = np.array([1.0, 0, 0, 0]) if ang < 1e-15 else quat_from_axis_angle(dr, ang)
            rot.append(quat_multiply(dq, q))
        return Trajectory(
            self.timestamps,
            np.array(rot),
            self.scale * (self.positions + off[:, 0:3]),
            self.scale * (self.velocities + off[:, 6:9]),
            1.0,
        )

    def with_scale(self, scale: float) -> "Trajectory":
        return replace(self, scale=scale)

    def subset(self, idx: Iterable[int]) -> "Trajectory":
        idx = np.asarray(list(idx), dtype=int)
        return Trajectory(
            self.timestamps[idx],
            self.rotations[idx],
            self.positions[idx],
            self.velocities[idx],
            self.scale,
            self.pose_offsets[idx],
        )


def interpolate_pose(trajectory: Trajectory, t: float) -> Pose:
    ts = trajectory.timestamps
    if not ts[0] <= t <= ts[-1]:
        raise OutOfRange(f"t={t} outside [{ts[0]}, {ts[-1]}]")
    k = int(np.searchsorted(ts, t, side="right")) - 1
    if k >= len(ts) - 1 or ts[k] == t:
        k = min(k, len(ts) - 1)
        return Pose(ts[k], trajectory.rotations[k], trajectory.positions[k])
    u = (t - ts[k]) / (ts[k + 1] - ts[k])
    pos = (1 - u) * trajectory.positions[k] + u * trajectory.positions[k + 1]
    rot = slerp(trajectory.rotations[k], trajectory.rotations[k + 1], u)
    return Pose(t, rot, pos)


def interpolate_velocity(trajectory: Trajectory, t: float) -> np.ndarray:
    ts = trajectory.timestamps
    if not ts[0] <= t <= ts[-1]:
        raise OutOfRange(f"t={t} outside [{ts[0]}, {ts[-1]}]")
    return np.array([np.interp(t, ts, trajectory.velocities[:, i]) for i in range(3)])


# --------------------------------------------------------------------------
# Doppler


def doppler_of_point(sensor_velocity, direction) -> float:
    return float(np.dot(np.asarray(direction, dtype=np.float64), np.asarray(sensor_velocity, dtype=np.float64)))


@dataclass(frozen=True)
class DopplerCircle:
    center: np.ndarray
    axis: np.ndarray
    range: float
    cos_theta: float
    directions: np.ndarray  # (n, 3)
    arc_weight: float

    @property
    def radius(self) -> float:
        return math.sqrt(max(0.0, 1.0 - self.cos_theta**2))

    @property
    def points(self) -> np.ndarray:
        return self.center + self.range * self.directions


def orthonormal_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``axis`` to a right-handed orthonormal basis."""
    a = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(a, e1)


def build_doppler_circle(pose: Pose, velocity, r_i: float, d_j: float, n_samples: int = 64) -> DopplerCircle:
    """Directions ``w`` with ``<w, v> = d_j`` and ``|w| = 1``, uniformly spaced in angle.

    ``arc_weight`` is ``r_i / |v|`` divided by the number of directions, so that
    summing per-direction returns times ``arc_weight`` gives the circle mean
    scaled by the range-Doppler bin-width correction.
    """
    v = np.asarray(velocity, dtype=np.float64)
    speed = float(np.linalg.norm(v))
    if speed < MIN_SPEED:
        raise EmptyIntersection("sensor speed too small for Doppler")
    cos_t = d_j / speed
    if abs(cos_t) > 1.0 + 1e-12:
        raise EmptyIntersection(f"|d|={abs(d_j):.4g} exceeds |v|={speed:.4g}")
    cos_t = float(np.clip(cos_t, -1.0, 1.0))
    axis = v / speed
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    if sin_t < 1e-12:
        dirs = (np.sign(cos_t) * axis)[None, :]
    else:
        e1, e2 = orthonormal_frame(axis)
        phi = 2 * np.pi * np.arange(n_samples) / n_samples
        dirs = cos_t * axis[None, :] + sin_t * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return DopplerCircle(
        center=np.asarray(pose.position, dtype=np.float64),
        axis=axis,
        range=float(r_i),
        cos_theta=cos_t,
        directions=dirs,
        arc_weight=float(r_i) / speed / len(dirs),
    )


def circle_directions_torch(velocity: torch.Tensor, cos_theta: torch.Tensor, n_samples: int) -> torch.Tensor:
    """Batched, differentiable circle directions.

    velocity: (B, 3); cos_theta: (B,) already clipped to [-1, 1].
    Returns (B, n_samples, 3).
    """
    speed = velocity.norm(dim=-1, keepdim=True)
    axis = velocity / speed
    helper = torch.zeros_like(axis)
    use_x = axis[:, 2].abs() >= 0.9
    helper[:, 2] = (~use_x).to(axis.dtype)
    helper[:, 0] = use_x.to(axis.dtype)
    e1 = torch.linalg.cross(helper, axis)
    e1 = e1 / e1.norm(dim=-1, keepdim=True)
    e2 = torch.linalg.cross(axis, e1)
    sin_t = (1 - cos_theta * cos_theta).clamp_min(0.0).sqrt()
    phi = 2 * math.pi * torch.arange(n_samples, dtype=velocity.dtype, device=velocity.device) / n_samples
    ring = torch.cos(phi)[None, :, None] * e1[:, None, :] + torch.sin(phi)[None, :, None] * e2[:, None, :]
    return cos_theta[:, None, None] * axis[:, None, :] + sin_t[:, None, None] * ring


def finite_difference(values: np.ndarray | torch.Tensor, times):
    """d/dt along axis 0: central differences inside, one-sided at the ends."""
    if isinstance(values, torch.Tensor):
        t = torch.as_tensor(times, dtype=values.dtype)
        shape = (-1,) + (1,) * (values.dim() - 1)
        inner = (values[2:] - values[:-2]) / (t[2:] - t[:-2]).reshape(shape)
        first = (values[1:2] - values[0:1]) / (t[1] - t[0])
        last = (values[-1:] - values[-2:-1]) / (t[-1] - t[-2])
        return torch.cat([first, inner, last], 0)
    values = np.asarray(values, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    shape = (-1,) + (1,) * (values.ndim - 1)
    inner = (values[2:] - values[:-2]) / (t[2:] - t[:-2]).reshape(shape)
    first = (values[1:2] - values[0:1]) / (t[1] - t[0])
    last = (values[-1:] - values[-2:-1]) / (t[-1] - t[-2])
    return np.concatenate([first, inner, last], 0)


# --------------------------------------------------------------------------
# JSON-lines trajectory file


def save_trajectory(path: str | Path, traj: Trajectory) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": True, "scale": traj.scale, "n": len(traj)}) + "\n")
        for t, q, p, v in zip(traj.timestamps, traj.rotations, traj.positions, traj.velocities):
            rec = {"t": float(t)}
            rec.update({k: float(x) for k, x in zip(("qw", "qx", "qy", "qz"), q)})
            rec.update({k: float(x) for k, x in zip(("px", "py", "pz"), p)})
            rec.update({k: float(x) for k, x in zip(("vx", "vy", "vz"), v)})
            fh.write(json.dumps(rec) + "\n")


def load_trajectory(path: str | Path) -> Trajectory:
    scale = 1.0
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("header"):
                scale = float(rec.get("scale", 1.0))
                continue
            rows.append(rec)
    return Trajectory(
        np.array([r["t"] for r in rows]),
        np.array([[r["qw"], r["qx"], r["qy"], r["qz"]] for r in rows]),
        np.array([[r["px"], r["py"], r["pz"]] for r in rows]),
        np.array([[r["vx"], r["vy"], r["vz"]] for r in rows]),
        scale,
    )


class TrajectoryParams(torch.nn.Module):
    """Learnable view of a Trajectory: per-frame offsets and log metric scale.

    Positions returned by :meth:`positions` live in the trajectory's own frame
    (the frame of the scene field); velocities from :meth:`velocities` are metric.
    """

    def __init__(self, traj: Trajectory, dtype=torch.float32):
        super().__init__()
        self.register_buffer("timestamps", torch.tensor(np.array(traj.timestamps), dtype=torch.float64))
        self.register_buffer("base_rotations", quat_to_matrix_torch(torch.tensor(np.array(traj.rotations), dtype=dtype)))
        self.register_buffer("base_quats", torch.tensor(np.array(traj.rotations), dtype=dtype))
        self.register_buffer("base_positions", torch.tensor(np.array(traj.positions), dtype=dtype))
        self.register_buffer("base_velocities", torch.tensor(np.array(traj.velocities), dtype=dtype))
        self.offsets = torch.nn.Parameter(torch.tensor(np.array(traj.pose_offsets), dtype=dtype).clone())
        self.log_scale = torch.nn.Parameter(torch.tensor(math.log(traj.scale), dtype=dtype))

    def __len__(self) -> int:
        return self.base_positions.shape[0]

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    def rotations(self, idx=None) -> torch.Tensor:
        idx = slice(None) if idx is None else idx
        return axis_angle_to_matrix(self.offsets[idx, 3:6]) @ self.base_rotations[idx]

    def positions(self, idx=None) -> torch.Tensor:
        idx = slice(None) if idx is None else idx
        return self.base_positions[idx] + self.offsets[idx, 0:3]

    def velocities(self, idx=None) -> torch.Tensor:
        idx = slice(None) if idx is None else idx
        return self.scale * (self.base_velocities[idx] + self.offsets[idx, 6:9])

    def set_scale(self, s: float) -> None:
        with torch.no_grad():
            self.log_scale.fill_(math.log(s))

    def to_trajectory(self) -> Trajectory:
        return Trajectory(
            self.timestamps.numpy(),
            self.base_quats.double().numpy(),
            self.base_positions.double().numpy(),
            self.base_velocities.double().numpy(),
            float(self.scale.detach()),
            self.offsets.detach().double().numpy(),
        )

"""Training losses: radar reconstruction, SSIM, geometry BCE, normals and pose regularisers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch

from .geometry import TrajectoryParams, finite_difference
from .metrics import ssim_map
from .proposal import loss_interlevel  # noqa: F401  (re-exported)

BCE_EPS = 1e-6


@dataclass
class LossWeights:
    r: float = 1e-3
    ssim: float = 0.01
    bce: float = 0.01
    prop_r: float = 1.0
    norm: float = 0.1
    norm_g: float = 1e-3
    norm_o: float = 1e-4
    regp: float = 1e-3
    regv: float = 1.0
    rega: float = 5e-3
    regk: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if v < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")
            setattr(self, f.name, v)

    @classmethod
    def indoor(cls) -> "LossWeights":
        return cls(r=1e-4)

    def to_dict(self) -> dict:
        return asdict(self)


def loss_reconstruction(y_gt: torch.Tensor, y_pred: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute error over valid entries."""
    if y_gt.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {tuple(y_gt.shape)} vs {tuple(y_pred.shape)}")
    err = (y_pred - y_gt).abs()
    if mask is None:
        return err.mean()
    mask = mask.to(torch.bool)
    if mask.shape != err.shape:
        raise ValueError("mask shape mismatch")
    n = mask.sum()
    return (err * mask).sum() / n.clamp_min(1)


def loss_ssim(y_gt: torch.Tensor, y_pred: torch.Tensor, cube: bool = True) -> torch.Tensor:
    """1 - mean SSIM; cubes (..., range, doppler, antenna) are split into per-antenna slices."""
    if cube:
        perm = list(range(y_gt.dim() - 3)) + [y_gt.dim() - 1, y_gt.dim() - 3, y_gt.dim() - 2]
        y_gt, y_pred = y_gt.permute(*perm), y_pred.permute(*perm)
    return 1 - ssim_map(y_gt, y_pred).mean()


def loss_bce_geometry(alpha_r: torch.Tensor, alpha_c: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    a = alpha_r.clamp(eps, 1 - eps)
    c = alpha_c.clamp(eps, 1 - eps)
    return -(c * torch.log(a) + (1 - c) * torch.log(1 - a)).mean()


def loss_normals(n_pred: torch.Tensor | None = None, n_gt: torch.Tensor | None = None,
                 weights: torch.Tensor | None = None, n_grad: torch.Tensor | None = None,
                 omegas: torch.Tensor | None = None, gt_mask: torch.Tensor | None = None):
    """(L_norm, L_norm_g, L_norm_o).

    L_norm: mean over points of |n - n_gt|^2 (``n_pred``/``n_gt`` (..., 3)).
    L_norm_g, L_norm_o: per-ray weighted sums over samples (``weights`` (R, S),
    ``n_pred`` (R, S, 3)), averaged over rays.
    """
    zero = torch.zeros(())
    l_norm = l_g = l_o = zero
    if n_gt is not None:
        d = ((n_pred - n_gt) ** 2).sum(-1)
        if gt_mask is not None:
            d = d[gt_mask]
        l_norm = d.mean() if d.numel() else zero
    if weights is not None and n_grad is not None:
        l_g = (weights * ((n_pred - n_grad) ** 2).sum(-1)).sum(-1).mean()
    if weights is not None and omegas is not None:
        if omegas.dim() == n_pred.dim() - 1:
            omegas = omegas[..., None, :]
        l_o = (weights * torch.clamp((n_pred * omegas).sum(-1), min=0) ** 2).sum(-1).mean()
    return l_norm, l_g, l_o


def _trapezoid_cumulative(v: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    dt = (t[1:] - t[:-1]).reshape(-1, *([1] * (v.dim() - 1)))
    seg = 0.5 * (v[1:] + v[:-1]) * dt
    return torch.cat([torch.zeros_like(v[:1]), torch.cumsum(seg, 0)], 0)


def pose_regularizers(traj: TrajectoryParams, window: int = 15):
    """(L_regp, L_regv, L_rega, L_regk) in the trajectory's own units.

    Derivatives are central finite differences; the windowed displacement of
    the corrected positions is compared against the trapezoid integral of the
    corrected velocities over the same window.
    """
    n = len(traj)
    if n < 3:
        raise ValueError("pose regularisers need at least 3 frames")
    t = traj.timestamps.to(traj.offsets.dtype)
    off = traj.offsets
    x = traj.base_positions
    v = traj.base_velocities + off[:, 6:9]
    l_p = (off**2).sum(-1).mean()
    l_v = ((finite_difference(x, t) - v) ** 2).sum(-1).mean()
    l_a = (finite_difference(v, t) ** 2).sum(-1).mean()
    w = min(int(window), n)
    xc = x + off[:, 0:3]
    integ = _trapezoid_cumulative(v, t)
    disp = xc[w - 1:] - xc[: n - w + 1]
    moved = integ[w - 1:] - integ[: n - w + 1]
    l_k = ((disp - moved) ** 2).sum(-1).mean()
    return l_p, l_v, l_a, l_k

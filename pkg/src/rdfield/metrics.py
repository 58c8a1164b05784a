"""Noise calibration, frame normalisation and masked SSIM / PSNR."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

PSNR_INF = float("inf")
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class NoiseFitError(ValueError):
    pass


# --------------------------------------------------------------------------
# noise model


@dataclass(frozen=True)
class NoiseModel:
    """``scale * chi2(dof)`` amplitude noise with an upper-tail threshold."""

    dof: float
    scale: float
    threshold: float
    p_value: float = 0.01

    def __post_init__(self):
        if not (self.dof > 0 and self.scale > 0 and self.threshold >= 0):
            raise ValueError("dof and scale must be positive, threshold non-negative")

    @classmethod
    def from_params(cls, dof: float, scale: float, p_value: float = 0.01) -> "NoiseModel":
        return cls(float(dof), float(scale), float(scale * stats.chi2.ppf(1 - p_value, dof)), p_value)

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        return self.scale * rng.chisquare(self.dof, size=shape)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_chi_square(samples, p_value: float = 0.01, min_samples: int = 1000) -> NoiseModel:
    """Method-of-moments fit: scale = var / (2 mean), dof = 2 mean^2 / var."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < min_samples:
        raise NoiseFitError(f"need at least {min_samples} noise samples, got {x.size}")
    m = x.mean()
    v = x.var()
    if not (m > 0 and v > 1e-30 * max(m * m, 1e-300)):
        raise NoiseFitError("degenerate noise samples (zero mean or variance)")
    return NoiseModel.from_params(2 * m * m / v, v / (2 * m), p_value)


def noise_columns(cube: np.ndarray, speed: float, dopplers: np.ndarray) -> np.ndarray:
    """Amplitudes of the Doppler columns no static point can reach (|d| > |v|)."""
    sel = np.abs(dopplers) > speed
    return cube[:, sel, :].ravel()


def fit_noise(cubes: Sequence[np.ndarray], speeds: Sequence[float], dopplers: np.ndarray,
              p_value: float = 0.01, min_samples: int = 1000) -> NoiseModel:
    samples = [noise_columns(np.asarray(c), float(s), np.asarray(dopplers)) for c, s in zip(cubes, speeds)]
    samples = np.concatenate(samples) if samples else np.zeros(0)
    return fit_chi_square(samples, p_value, min_samples)


# --------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class ClipBounds:
    low: float
    high: float

    def apply(self, x):
        span = max(self.high - self.low, 1e-12)
        if isinstance(x, torch.Tensor):
            return (x.clamp(self.low, self.high) - self.low) / span
        return (np.clip(x, self.low, self.high) - self.low) / span


def clip_bounds(cubes: Sequence[np.ndarray], low_pct: float = 0.01, high_pct: float = 99.99) -> ClipBounds:
    allv = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c in cubes])
    lo, hi = np.percentile(allv, [low_pct, high_pct])
    return ClipBounds(float(lo), float(hi))


def normalize_and_mask(cubes: Sequence[np.ndarray], model: NoiseModel, bounds: ClipBounds | None = None):
    """Clip to dataset-wide percentiles, map to [0, 1]; mask keeps amplitudes above the noise threshold."""
    bounds = clip_bounds(cubes) if bounds is None else bounds
    out = [bounds.apply(np.asarray(c, dtype=np.float64)) for c in cubes]
    masks = [np.asarray(c) >= model.threshold for c in cubes]
    return out, masks, bounds


# --------------------------------------------------------------------------
# SSIM / PSNR


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # x: (N, 1, H, W); separable filter with reflect padding
    p = win.numel() // 2
    x = F.pad(x, (p, p, p, p), mode="reflect")
    x = F.conv2d(x, win.reshape(1, 1, 1, -1))
    return F.conv2d(x, win.reshape(1, 1, -1, 1))


def ssim_map(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0, size: int = 11,
             sigma: float = 1.5) -> torch.Tensor:
    """Local SSIM for images (..., H, W); Gaussian window, reflect padding, same shape out."""
    shape = a.shape
    a = a.reshape(-1, 1, shape[-2], shape[-1])
    b = b.reshape(-1, 1, shape[-2], shape[-1]).to(a.dtype)
    win = gaussian_window(size, sigma, a.dtype)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    saa = _blur(a * a, win) - mu_a**2
    sbb = _blur(b * b, win) - mu_b**2
    sab = _blur(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return (num / den).reshape(shape)


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def ssim(a, b, data_range: float = 1.0) -> float:
    return float(ssim_map(_as_tensor(a), _as_tensor(b), data_range).mean())


def masked_ssim(a, b, mask=None, data_range: float = 1.0) -> float:
    """Mean local SSIM over valid window centres of 2-D images (or stacks of them)."""
    m = ssim_map(_as_tensor(a), _as_tensor(b), data_range)
    if mask is None:
        return float(m.mean())
    mask = _as_tensor(mask).bool()
    if not bool(mask.any()):
        raise ValueError("empty mask")
    return float(m[mask].mean())


def masked_psnr(a, b, mask=None, data_range: float = 1.0) -> float:
    a, b = _as_tensor(a).double(), _as_tensor(b).double()
    err = (a - b) ** 2
    if mask is not None:
        mask = _as_tensor(mask).bool()
        if not bool(mask.any()):
            raise ValueError("empty mask")
        err = err[mask]
    mse = float(err.mean())
    if mse == 0:
        return PSNR_INF
    return 10 * math.log10(data_range**2 / mse)


def cube_slices(cube) -> torch.Tensor:
    """(range, doppler, antenna) -> (antenna, range, doppler)."""
    c = _as_tensor(cube)
    return c.permute(*range(c.dim() - 3), -1, -3, -2)


# --------------------------------------------------------------------------
# evaluation report


@dataclass
class EvalReport:
    ssim: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    valid_fraction: list = field(default_factory=list)
    per_antenna_ssim: dict = field(default_factory=dict)
    per_antenna_psnr: dict = field(default_factory=dict)
    clip_low: float = 0.0
    clip_high: float = 1.0

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @property
    def mean_psnr(self) -> float:
        finite = [p for p in self.psnr if math.isfinite(p)]
        if not self.psnr:
            return float("nan")
        return float(np.mean(finite)) if finite else PSNR_INF

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_ssim"] = self.mean_ssim
        d["mean_psnr"] = self.mean_psnr
        return d


def evaluate_frames(gt_norm: Sequence[np.ndarray], pred_norm: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                    bounds: ClipBounds | None = None, antennas: Sequence[int] | None = None) -> EvalReport:
    """Masked SSIM / PSNR per frame on per-antenna range-Doppler slices of normalised cubes."""
    rep = EvalReport()
    if bounds is not None:
        rep.clip_low, rep.clip_high = bounds.low, bounds.high
    K = np.asarray(gt_norm[0]).shape[-1]
    antennas = list(range(K)) if antennas is None else list(antennas)
    per_a_s = {k: [] for k in antennas}
    per_a_p = {k: [] for k in antennas}
    for g, p, m in zip(gt_norm, pred_norm, masks):
        g, p, m = (np.asarray(x)[..., antennas] for x in (g, p, m))
        if not m.any():
            continue
        gs, ps, ms = cube_slices(g), cube_slices(p), cube_slices(m)
        rep.ssim.append(masked_ssim(gs, ps, ms))
        rep.psnr.append(masked_psnr(gs, ps, ms))
        rep.valid_fraction.append(float(m.mean()))
        for i, k in enumerate(antennas):
            if ms[i].any():
                per_a_s[k].append(masked_ssim(gs[i], ps[i], ms[i]))
                per_a_p[k].append(masked_psnr(gs[i], ps[i], ms[i]))
    rep.per_antenna_ssim = {int(k): float(np.mean(v)) for k, v in per_a_s.items() if v}
    rep.per_antenna_psnr = {int(k): float(np.mean([x for x in v if math.isfinite(x)] or [PSNR_INF]))
                            for k, v in per_a_p.items() if v}
    return rep

"""Differentiable scene representation.

Dense multi-resolution voxel grids decoded by affine heads: camera and radar
geometry (occupancy + geometry code), camera colour, radar reflectance with
retroreflective BRDF bases, surface normals and per-antenna gain patterns.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_MAGIC = b"RDFC"
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# grids


class MultiResGrid(nn.Module):
    """Stack of dense cubic feature grids over an axis-aligned box.

    Level ``l`` holds ``resolutions[l]**3`` nodes with ``feature_dim`` features;
    nodes sit on the box corners (``align_corners``), so a query exactly at a
    node returns that node's feature. Queries outside the box return zeros.
    """

    def __init__(self, bounds, resolutions: Sequence[int] = (16, 32, 64), feature_dim: int = 2,
                 init_std: float = 1e-4, generator: torch.Generator | None = None):
        super().__init__()
        resolutions = [int(r) for r in resolutions]
        if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
            raise ValueError("resolutions must be strictly increasing")
        if min(resolutions) < 2:
            raise ValueError("each level needs at least 2 nodes per axis")
        b = torch.as_tensor(np.asarray(bounds, dtype=np.float64).reshape(2, 3), dtype=torch.float32)
        self.register_buffer("bounds", b)
        self.resolutions = resolutions
        self.feature_dim = int(feature_dim)
        self.levels = nn.ParameterList(
            [
                nn.Parameter(torch.randn(1, feature_dim, r, r, r, generator=generator) * init_std)
                for r in resolutions
            ]
        )

    @property
    def out_dim(self) -> int:
        return self.feature_dim * len(self.resolutions)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        lo, hi = self.bounds[0].to(x.dtype), self.bounds[1].to(x.dtype)
        return 2 * (x - lo) / (hi - lo) - 1

    def inside(self, x: torch.Tensor) -> torch.Tensor:
        u = self.normalize(x)
        return (u.abs() <= 1).all(-1)

    def forward(self, x: torch.Tensor, concat: bool = True) -> torch.Tensor:
        shape = x.shape[:-1]
        u = self.normalize(x.reshape(-1, 3))
        grid = u.reshape(1, -1, 1, 1, 3).to(self.levels[0].dtype)
        feats = []
        for lvl in self.levels:
            f = F.grid_sample(lvl, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
            feats.append(f.reshape(self.feature_dim, -1).t())
        mask = (u.abs() <= 1).all(-1, keepdim=True).to(feats[0].dtype)
        out = torch.cat(feats, -1) if concat else torch.stack(feats, 0).sum(0)
        out = out * mask
        return out.reshape(*shape, out.shape[-1])

    def node_positions(self, level: int) -> torch.Tensor:
        """World coordinates of level nodes, shape (R, R, R, 3) indexed [z, y, x]."""
        r = self.resolutions[level]
        lo, hi = self.bounds[0], self.bounds[1]
        axes = [torch.linspace(float(lo[i]), float(hi[i]), r) for i in range(3)]
        zz, yy, xx = torch.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return torch.stack([xx, yy, zz], -1)


class GeometryField(nn.Module):
    """Occupancy in [0, 1] (logistic head) and a geometry code (affine head)."""

    def __init__(self, bounds, resolutions=(16, 32, 64), feature_dim: int = 2, code_dim: int = 15,
                 density_bias: float = -6.0, init_std: float = 1e-4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.grid = MultiResGrid(bounds, resolutions, feature_dim, init_std, generator)
        self.code_dim = int(code_dim)
        self.density_head = nn.Linear(self.grid.out_dim, 1)
        self.code_head = nn.Linear(self.grid.out_dim, self.code_dim)
        with torch.no_grad():
            self.density_head.weight.fill_(1.0)
            self.density_head.bias.fill_(density_bias)
            self.code_head.weight.normal_(0.0, 1.0 / math.sqrt(self.grid.out_dim), generator=generator)
            self.code_head.bias.zero_()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.grid(x)
        inside = self.grid.inside(x).to(feat.dtype)
        alpha = torch.sigmoid(self.density_head(feat)).squeeze(-1) * inside
        code = self.code_head(feat) * inside[..., None]
        return alpha, code

    def alpha(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)[0]


def query_geometry(field: GeometryField, x) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(x, dtype=field.density_head.weight.dtype)
    return field(x)


def distill_geometry(camera: GeometryField) -> GeometryField:
    """Radar geometry initialised as an independent copy of the camera geometry."""
    radar = copy.deepcopy(camera)
    for p in radar.parameters():
        p.requires_grad_(True)
    return radar


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# --------------------------------------------------------------------------
# view encodings


@dataclass(frozen=True)
class BRDFConfig:
    roughnesses: tuple = tuple(np.geomspace(0.05, 5.0, 11).tolist())

    def __post_init__(self):
        r = tuple(float(x) for x in self.roughnesses)
        if any(x <= 0 for x in r):
            raise ValueError("roughness values must be positive")
        if list(r) != sorted(r):
            raise ValueError("roughness values must be sorted ascending")
        object.__setattr__(self, "roughnesses", r)

    def __len__(self):
        return len(self.roughnesses)


def brdf_bases(omega, n, config: BRDFConfig = BRDFConfig()):
    """exp(-(1 - max(-w.n, 0)) / rho) for every roughness rho; last axis is rho."""
    if isinstance(omega, torch.Tensor):
        cos = (omega * n).sum(-1)
        rho = torch.as_tensor(config.roughnesses, dtype=cos.dtype, device=cos.device)
        facing = torch.clamp(-cos, min=0.0)
        return torch.exp(-(1 - facing)[..., None] / rho)
    cos = np.sum(np.asarray(omega, dtype=np.float64) * np.asarray(n, dtype=np.float64), axis=-1)
    return brdf_bases_from_cos(cos, config)


def brdf_bases_from_cos(cos, config: BRDFConfig = BRDFConfig()) -> np.ndarray:
    cos = np.asarray(cos, dtype=np.float64)
    rho = np.asarray(config.roughnesses)
    return np.exp(-(1 - np.maximum(-cos, 0.0))[..., None] / rho)


def sh_count(levels: int) -> int:
    return levels * levels


def spherical_harmonics(d: torch.Tensor, levels: int) -> torch.Tensor:
    """Real orthonormal spherical harmonics of unit directions, bands 0..levels-1.

    Ordering within band ``l`` is m = -l..l.
    """
    if levels <= 0:
        return d.new_zeros(d.shape[:-1] + (0,))
    x, y, z = d.unbind(-1)
    # (x + iy)^m split into real/imag parts
    re = [torch.ones_like(x)]
    im = [torch.zeros_like(x)]
    for m in range(1, levels):
        re.append(x * re[m - 1] - y * im[m - 1])
        im.append(x * im[m - 1] + y * re[m - 1])
    out = {}
    for m in range(levels):
        # P̃_l^m(z): associated Legendre polynomial with sin^m factored out
        p_mm = (-1) ** m * float(np.prod(np.arange(1, 2 * m, 2))) if m > 0 else 1.0
        prev2 = None
        prev1 = torch.full_like(z, p_mm)
        for l in range(m, levels):
            if l == m:
                p = prev1
            elif l == m + 1:
                p = z * (2 * m + 1) * prev1
                prev2, prev1 = prev1, p
            else:
                p = ((2 * l - 1) * z * prev1 - (l + m - 1) * prev2) / (l - m)
                prev2, prev1 = prev1, p
            k = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
            if m == 0:
                out[(l, 0)] = k * p
            else:
                out[(l, m)] = math.sqrt(2) * k * re[m] * p
                out[(l, -m)] = math.sqrt(2) * k * im[m] * p
    return torch.stack([out[(l, m)] for l in range(levels) for m in range(-l, l + 1)], -1)


# --------------------------------------------------------------------------
# appearance heads


class RadarAppearance(nn.Module):
    """Reflectance c_r >= 0 from [geometry code | BRDF bases | SH(view)].

    ``squash`` is ``"exp"`` (default) or ``"softplus"``. ``hidden`` > 0 inserts
    one ReLU layer of that width before the output.
    """

    def __init__(self, code_dim: int = 15, brdf: BRDFConfig = BRDFConfig(), sh_levels: int = 4,
                 use_bases: bool = True, use_sh: bool = True, squash: str = "exp", hidden: int = 0,
                 init_std: float = 1e-2, generator: torch.Generator | None = None):
        super().__init__()
        if squash not in ("exp", "softplus"):
            raise ValueError(f"unknown squash {squash!r}")
        self.brdf = brdf
        self.sh_levels = int(sh_levels)
        self.use_bases = bool(use_bases)
        self.use_sh = bool(use_sh)
        self.squash = squash
        self.code_dim = int(code_dim)
        n_in = code_dim + (len(brdf) if use_bases else 0) + (sh_count(sh_levels) if use_sh else 0)
        self.n_in = n_in
        if hidden > 0:
            self.hidden = nn.Linear(n_in, hidden)
            self.head = nn.Linear(hidden, 1)
        else:
            self.hidden = None
            self.head = nn.Linear(n_in, 1)
        with torch.no_grad():
            for lin in [m for m in (self.hidden, self.head) if m is not None]:
                lin.weight.normal_(0.0, init_std, generator=generator)
                lin.bias.zero_()

    def inputs(self, code: torch.Tensor, omega: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
        parts = [code]
        if self.use_bases:
            parts.append(brdf_bases(omega, n, self.brdf))
        if self.use_sh:
            parts.append(spherical_harmonics(omega, self.sh_levels))
        return torch.cat(parts, -1)

    def forward(self, code: torch.Tensor, omega: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
        h = self.inputs(code, omega, n)
        if self.hidden is not None:
            h = torch.relu(self.hidden(h))
        z = self.head(h).squeeze(-1)
        if self.squash == "exp":
            return torch.exp(z.clamp(max=30.0))
        return F.softplus(z)


def query_reflectance(app: RadarAppearance, code, omega, n) -> torch.Tensor:
    dt = app.head.weight.dtype
    return app(torch.as_tensor(code, dtype=dt), torch.as_tensor(omega, dtype=dt), torch.as_tensor(n, dtype=dt))


class CameraAppearance(nn.Module):
    def __init__(self, code_dim: int = 15, sh_levels: int = 4, init_std: float = 1e-2,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.sh_levels = int(sh_levels)
        self.color_head = nn.Linear(code_dim + sh_count(sh_levels), 3)
        with torch.no_grad():
            self.color_head.weight.normal_(0.0, init_std, generator=generator)
            self.color_head.bias.zero_()

    def forward(self, code: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
        h = torch.cat([code, spherical_harmonics(omega, self.sh_levels)], -1)
        return torch.sigmoid(self.color_head(h))


class NormalField(nn.Module):
    """Unit normals from the sum of per-level 3-channel grid features."""

    def __init__(self, bounds, resolutions=(16, 32), init_std: float = 1e-4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.grid = MultiResGrid(bounds, resolutions, 3, init_std, generator)

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        return self.grid(x, concat=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        r = self.raw(x)
        return r / r.norm(dim=-1, keepdim=True).clamp_min(1e-8)


class AntennaGainModel(nn.Module):
    """Positive per-antenna gain over sensor-frame (azimuth, elevation).

    gain_k = pattern_k * exp(bilinear(log-grid_k)); the log-grids start at zero.
    ``pattern_k`` is a fixed Gaussian beam centred at ``beam_azimuths[k]`` when
    beam widths are given and 1 otherwise.
    """

    def __init__(self, n_antenna: int = 8, n_az: int = 16, n_el: int = 8,
                 beam_azimuths: Sequence[float] | None = None, beam_width_az: float | None = None,
                 beam_width_el: float | None = None):
        super().__init__()
        self.n_antenna = int(n_antenna)
        self.log_gain = nn.Parameter(torch.zeros(1, n_antenna, n_el, n_az))
        az = torch.zeros(n_antenna) if beam_azimuths is None else torch.as_tensor(list(beam_azimuths), dtype=torch.float32)
        if len(az) != n_antenna:
            raise ValueError("need one beam azimuth per antenna")
        self.register_buffer("beam_azimuths", az)
        self.beam_width_az = beam_width_az
        self.beam_width_el = beam_width_el

    def pattern(self, az: torch.Tensor, el: torch.Tensor) -> torch.Tensor:
        out = torch.ones(az.shape + (self.n_antenna,), dtype=az.dtype, device=az.device)
        if self.beam_width_az:
            d = az[..., None] - self.beam_azimuths.to(az.dtype)
            d = torch.atan2(torch.sin(d), torch.cos(d))
            out = out * torch.exp(-0.5 * (d / self.beam_width_az) ** 2)
        if self.beam_width_el:
            out = out * torch.exp(-0.5 * (el / self.beam_width_el) ** 2)[..., None]
        return out

    def forward(self, omega_sensor: torch.Tensor) -> torch.Tensor:
        """Gains (..., K) for unit directions in the sensor frame."""
        shape = omega_sensor.shape[:-1]
        w = omega_sensor.reshape(-1, 3)
        az = torch.atan2(w[:, 1], w[:, 0])
        el = torch.asin(w[:, 2].clamp(-1.0, 1.0))
        grid = torch.stack([az / math.pi, el / (math.pi / 2)], -1).reshape(1, -1, 1, 2)
        lg = F.grid_sample(self.log_gain, grid.to(self.log_gain.dtype), mode="bilinear",
                           padding_mode="border", align_corners=True)
        lg = lg.reshape(self.n_antenna, -1).t()
        g = self.pattern(az, el) * torch.exp(lg)
        return g.reshape(*shape, self.n_antenna)


# --------------------------------------------------------------------------
# the full scene


@dataclass
class FieldConfig:
    bounds: tuple = ((-4.0, -4.0, 0.0), (4.0, 4.0, 3.0))
    resolutions: tuple = (16, 32, 64)
    feature_dim: int = 2
    code_dim: int = 15
    sh_levels: int = 4
    roughnesses: tuple = tuple(np.geomspace(0.05, 5.0, 11).tolist())
    use_bases: bool = True
    use_sh: bool = True
    reflectance_squash: str = "exp"
    reflectance_hidden: int = 0
    normal_resolutions: tuple = (16, 32)
    proposal_resolutions: tuple = (32, 64)
    proposal_samples: tuple = (48, 32)
    n_antenna: int = 8
    gain_grid: tuple = (16, 8)
    beam_azimuths: tuple | None = None
    beam_width_az: float | None = None
    beam_width_el: float | None = None
    density_bias: float = -6.0
    init_std: float = 1e-4

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        return cls(**d)


class SceneField(nn.Module):
    """Every learnable scene quantity: the differentiable parameter vector."""

    def __init__(self, config: FieldConfig = FieldConfig(), seed: int = 0):
        super().__init__()
        from .proposal import ProposalField

        self.config = config
        g = torch.Generator().manual_seed(seed)
        brdf = BRDFConfig(config.roughnesses)
        kw = dict(feature_dim=config.feature_dim, code_dim=config.code_dim,
                  density_bias=config.density_bias, init_std=config.init_std, generator=g)
        self.camera_geometry = GeometryField(config.bounds, config.resolutions, **kw)
        self.camera_appearance = CameraAppearance(config.code_dim, config.sh_levels, generator=g)
        self.radar_geometry = GeometryField(config.bounds, config.resolutions, **kw)
        self.radar_appearance = RadarAppearance(
            config.code_dim, brdf, config.sh_levels, config.use_bases, config.use_sh,
            config.reflectance_squash, config.reflectance_hidden, generator=g)
        self.normals = NormalField(config.bounds, config.normal_resolutions, generator=g)
        n_az, n_el = config.gain_grid
        self.gains = AntennaGainModel(config.n_antenna, n_az, n_el, config.beam_azimuths,
                                      config.beam_width_az, config.beam_width_el)
        self.proposal = ProposalField(config.bounds, config.proposal_resolutions, config.proposal_samples, generator=g)

    @property
    def bounds(self) -> torch.Tensor:
        return self.radar_geometry.grid.bounds

    def distill(self) -> None:
        """Copy camera geometry into the radar geometry and freeze the camera side."""
        self.radar_geometry = distill_geometry(self.camera_geometry)
        freeze(self.camera_geometry)
        freeze(self.camera_appearance)


# --------------------------------------------------------------------------
# checkpoint


def _tensor_order(name: str) -> tuple[int, str]:
    if ".levels." in name:
        return (0, name)
    if "log_gain" in name:
        return (2, name)
    return (1, name)


def save_checkpoint(path: str | Path, scene: SceneField, extra: dict[str, torch.Tensor] | None = None,
                    meta: dict | None = None) -> None:
    """Binary little-endian checkpoint.

    Layout: magic, version, header length, JSON header (bounds, level
    resolutions, feature dims, config, tensor directory), then raw float32
    arrays: grid levels, then head matrices, then gain grids, then extras.
    """
    state = {k: v for k, v in scene.state_dict().items()}
    names = sorted(state, key=_tensor_order)
    extra = extra or {}
    tensors = [(n, state[n]) for n in names] + [("extra/" + k, v) for k, v in extra.items()]
    header = {
        "config": scene.config.to_dict(),
        "bounds": np.asarray(scene.config.bounds, dtype=float).tolist(),
        "resolutions": list(scene.config.resolutions),
        "feature_dim": scene.config.feature_dim,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[SceneField, dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    offset = 12 + hlen
    arrays = {}
    for rec in header["tensors"]:
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(rec["shape"])
        offset += 4 * n
        arrays[rec["name"]] = torch.from_numpy(arr.astype(np.float32))
    scene = SceneField(FieldConfig.from_dict(header["config"]))
    state = {k: v for k, v in arrays.items() if not k.startswith("extra/")}
    scene.load_state_dict(state)
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return scene, extra, header.get("meta", {})

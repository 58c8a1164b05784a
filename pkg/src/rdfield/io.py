"""File formats: radar frame binaries, heatmaps, dataset manifests and key = value configs."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from PIL import Image

from .geometry import load_trajectory, save_trajectory
from .metrics import NoiseModel
from .renderer import CameraIntrinsics, RadarConfig, RangeDopplerFrame

FRAME_MAGIC = b"RDAF"
FRAME_VERSION = 1
FRAME_HEADER = struct.Struct("<4sIIIIddd")
MANIFEST_NAME = "manifest.json"
ANSWERS_NAME = "answers.json"
ENV_PREFIX = "RDFIELD_"


class InputError(ValueError):
    """Invalid user input: bad spec, missing file, unreadable format."""


# --------------------------------------------------------------------------
# radar frames


def write_frame(path: str | Path, frame: RangeDopplerFrame, radar: RadarConfig) -> None:
    cube = np.ascontiguousarray(frame.cube, dtype="<f4")
    if cube.shape != (radar.n_range, radar.n_doppler, radar.n_antenna):
        raise InputError(f"cube shape {cube.shape} does not match the radar config")
    with open(path, "wb") as fh:
        fh.write(FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, radar.n_range, radar.n_doppler, radar.n_antenna,
                                   radar.range_resolution, radar.doppler_resolution, frame.timestamp))
        fh.write(cube.tobytes())


def read_frame(path: str | Path) -> tuple[RangeDopplerFrame, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < FRAME_HEADER.size:
        raise InputError(f"{path}: truncated frame file")
    magic, version, nr, nd, na, rres, dres, ts = FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise InputError(f"{path}: not a radar frame file")
    if version != FRAME_VERSION:
        raise InputError(f"{path}: unsupported frame version {version}")
    n = nr * nd * na
    if len(data) != FRAME_HEADER.size + 4 * n:
        raise InputError(f"{path}: payload size does not match header")
    cube = np.frombuffer(data, dtype="<f4", count=n, offset=FRAME_HEADER.size).reshape(nr, nd, na)
    info = dict(n_range=nr, n_doppler=nd, n_antenna=na, range_resolution=rres, doppler_resolution=dres)
    return RangeDopplerFrame(ts, cube.astype(np.float32)), info


# --------------------------------------------------------------------------
# images and heatmaps


def write_rgb_png(path: str | Path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def read_rgb_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def write_normal_png(path: str | Path, normals: np.ndarray) -> None:
    """Unit normals encoded as (n + 1) / 2; pixels with no surface are stored black."""
    n = np.asarray(normals, dtype=np.float64)
    valid = np.linalg.norm(n, axis=-1) > 0.5
    enc = np.where(valid[..., None], np.clip(np.round((n + 1) / 2 * 254) + 1, 1, 255), 0).astype(np.uint8)
    Image.fromarray(enc, "RGB").save(path)


def read_normal_png(path: str | Path) -> np.ndarray:
    enc = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    valid = enc.max(-1) > 0
    n = (enc - 1) / 254 * 2 - 1
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    return np.where(valid[..., None], n, 0.0).astype(np.float32)


def write_heatmap(path: str | Path, values: np.ndarray, axes: Mapping[str, Any] | None = None,
                  vmin: float | None = None, vmax: float | None = None) -> dict:
    """16-bit grayscale PNG (or binary PGM for ``.pgm``) plus a JSON sidecar with axes and bounds."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise InputError("heatmaps are 2-D")
    lo = float(np.nanmin(v)) if vmin is None else float(vmin)
    hi = float(np.nanmax(v)) if vmax is None else float(vmax)
    scaled = np.clip((v - lo) / (hi - lo if hi > lo else 1.0), 0, 1)
    q = np.round(scaled * 65535).astype(np.uint16)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        with open(path, "wb") as fh:
            fh.write(f"P5\n{q.shape[1]} {q.shape[0]}\n65535\n".encode())
            fh.write(q.astype(">u2").tobytes())
    else:
        Image.fromarray(q).save(path)
    meta = {"shape": list(v.shape), "vmin": lo, "vmax": hi, "colormap": "gray16", "axes": dict(axes or {})}
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return meta


def read_heatmap(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as fh:
        meta = json.load(fh)
    if path.suffix.lower() == ".pgm":
        with open(path, "rb") as fh:
            data = fh.read()
        parts = data.split(maxsplit=4)
        w, h = int(parts[1]), int(parts[2])
        q = np.frombuffer(parts[4], dtype=">u2", count=w * h).reshape(h, w)
    else:
        q = np.asarray(Image.open(path))
    v = meta["vmin"] + q.astype(np.float64) / 65535 * (meta["vmax"] - meta["vmin"])
    return v, meta


# --------------------------------------------------------------------------
# manifest


@dataclass
class Manifest:
    root: str
    frames: list
    images: list
    normals: list
    trajectory: str
    radar: dict
    intrinsics: dict
    bounds: list
    split: dict = field(default_factory=lambda: {"rule": "temporal", "test_fraction": 0.2})
    noise: dict | None = None
    seed: int = 0
    version: int = 1

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel

    def split_indices(self, positions: np.ndarray | None = None) -> tuple[list[int], list[int]]:
        n = len(self.frames)
        rule = self.split.get("rule", "temporal")
        if rule == "temporal":
            n_test = int(round(float(self.split.get("test_fraction", 0.2)) * n))
            return list(range(n - n_test)), list(range(n - n_test, n))
        if rule == "spatial":
            if positions is None:
                raise InputError("spatial split needs trajectory positions")
            axis = int(self.split.get("axis", 0))
            thr = float(self.split.get("threshold", 0.0))
            test = [i for i in range(n) if positions[i, axis] > thr]
            return [i for i in range(n) if i not in set(test)], test
        raise InputError(f"unknown split rule {rule!r}")

    def validate(self) -> None:
        missing = [p for p in self.frames + self.images + self.normals + [self.trajectory]
                   if not self.path(p).exists()]
        if missing:
            raise InputError(f"manifest references missing files: {missing[:3]}")
        if self.images and len(self.images) != len(self.frames):
            raise InputError("one image per frame expected")
        tr = load_trajectory(self.path(self.trajectory))
        train, test = self.split_indices(np.asarray(tr.positions))
        if sorted(train + test) != list(range(len(self.frames))):
            raise InputError("split must cover every frame exactly once")
        if len(tr) != len(self.frames):
            raise InputError("trajectory length does not match frame count")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("root")
        return d

    def save(self) -> Path:
        p = Path(self.root) / MANIFEST_NAME
        with open(p, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return p

    @classmethod
    def load(cls, root: str | Path) -> "Manifest":
        root = Path(root)
        p = root / MANIFEST_NAME if root.is_dir() else root
        try:
            with open(p) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"cannot read manifest {p}: {e}") from e
        return cls(root=str(p.parent), **d)


def write_dataset(ds, root: str | Path, seed: int = 0) -> Manifest:
    """Write a synthetic Dataset as frame binaries, PNGs, trajectory and manifest (+ sealed answers)."""
    root = Path(root)
    try:
        (root / "frames").mkdir(parents=True, exist_ok=True)
        (root / "images").mkdir(exist_ok=True)
        (root / "normals").mkdir(exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create dataset directory {root}: {e}") from e
    frames, images, normals = [], [], []
    for i, fr in enumerate(ds.frames):
        rel = f"frames/{i:05d}.rdf"
        write_frame(root / rel, fr, ds.radar)
        frames.append(rel)
        rel = f"images/{i:05d}.png"
        write_rgb_png(root / rel, ds.images[i])
        images.append(rel)
        rel = f"normals/{i:05d}.png"
        write_normal_png(root / rel, ds.normal_maps[i])
        normals.append(rel)
    save_trajectory(root / "trajectory.jsonl", ds.trajectory)
    m = Manifest(str(root), frames, images, normals, "trajectory.jsonl", ds.radar.to_dict(),
                 ds.intrinsics.to_dict(), [list(ds.bounds[0]), list(ds.bounds[1])],
                 {"rule": "temporal", "test_fraction": ds.test_fraction},
                 ds.noise.to_dict() if ds.noise is not None else None, seed)
    m.save()
    with open(root / ANSWERS_NAME, "w") as fh:
        json.dump({"true_scale": ds.true_scale}, fh, indent=2)
    return m


def read_dataset(root: str | Path, with_answers: bool = False):
    """Load a dataset directory; the hidden scale is only read when ``with_answers`` is set."""
    from .synth import Dataset

    m = Manifest.load(root)
    m.validate()
    radar = RadarConfig.from_dict(m.radar)
    intr = CameraIntrinsics(**m.intrinsics)
    frames = [read_frame(m.path(p))[0] for p in m.frames]
    images = np.stack([read_rgb_png(m.path(p)) for p in m.images]) if m.images else np.zeros((0,))
    normals = np.stack([read_normal_png(m.path(p)) for p in m.normals]) if m.normals else np.zeros((0,))
    traj = load_trajectory(m.path(m.trajectory))
    scale = None
    if with_answers and (Path(m.root) / ANSWERS_NAME).exists():
        with open(Path(m.root) / ANSWERS_NAME) as fh:
            scale = float(json.load(fh)["true_scale"])
    noise = NoiseModel(**m.noise) if m.noise else None
    bounds = (tuple(m.bounds[0]), tuple(m.bounds[1]))
    ds = Dataset(frames, [f.cube for f in frames], images, normals, traj, radar, intr, bounds, scale, noise,
                 float(m.split.get("test_fraction", 0.2)))
    return ds, m


# --------------------------------------------------------------------------
# key = value configuration


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_config(path: str | Path | None) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return parse_config_text(Path(path).read_text())
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e}") from e


def env_overrides(keys, environ: Mapping[str, str] | None = None) -> dict[str, str]:
    env = os.environ if environ is None else environ
    return {k: env[ENV_PREFIX + k.upper()] for k in keys if ENV_PREFIX + k.upper() in env}


def _coerce(value: str, typ) -> Any:
    origin = typing.get_origin(typ)
    args = [a for a in typing.get_args(typ) if a is not type(None)]
    v = value.strip()
    if v.lower() in ("none", "null", ""):
        if type(None) in typing.get_args(typ):
            return None
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", typing.Union)) and args:
        return _coerce(v, args[0])
    if typ is bool or typ == "bool":
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise InputError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(v)
    if typ in (float, "float"):
        return float(v)
    if typ in (tuple, "tuple") or origin is tuple:
        parts = [p for p in v.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(int(p) if p.strip().lstrip("-").isdigit() else float(p) for p in parts)
    if typ in (str, "str"):
        return v
    return v


def apply_overrides(obj, values: Mapping[str, str], prefix: str = ""):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced onto matching fields."""
    hints = typing.get_type_hints(type(obj))
    kw = {}
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        if key in values:
            try:
                kw[f.name] = _coerce(values[key], hints[f.name])
            except (TypeError, ValueError) as e:
                raise InputError(f"bad value for {key}: {values[key]!r}") from e
    try:
        return dataclasses.replace(obj, **kw)
    except ValueError as e:
        raise InputError(f"invalid {type(obj).__name__}: {e}") from e


def parse_antennas(spec: str | None) -> tuple | None:
    """'0-3' or '0,2,5' -> tuple of antenna indices."""
    if spec is None or spec == "":
        return None
    out = []
    for part in spec.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)

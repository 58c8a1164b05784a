import hashlib
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import tiny_dataset, tiny_radar
from rdfield.metrics import fit_chi_square, fit_noise, masked_ssim
from rdfield.renderer import CameraIntrinsics, render_camera_rays
from rdfield.synth import (Material, Primitive, SceneSpec, TrajectorySpec, bake_scene, general_scene,
                           generate_dataset, make_trajectory,
                           retro_plates_scene, scale_spec, tent_scene)


def _digest(ds) -> str:
    h = hashlib.sha256()
    for f in ds.frames:
        h.update(np.float64(f.timestamp).tobytes())
        h.update(f.cube.tobytes())
    for arr in (ds.images, ds.normal_maps, ds.trajectory.positions, ds.trajectory.velocities,
                ds.trajectory.rotations):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# specs


def test_material_validation():
    with pytest.raises(ValueError):
        Material(camera_alpha=1.5)
    with pytest.raises(ValueError):
        Material(radar_alpha=-0.1)
    with pytest.raises(ValueError):
        Material(base_reflectance=-1.0)
    with pytest.raises(ValueError):
        Material(roughness=0.0)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        Primitive("cone")
    with pytest.raises(ValueError):
        SceneSpec((Primitive("sphere", (9.0, 0.0, 1.0), (0.3,)),))
    with pytest.raises(ValueError):
        SceneSpec(bounds=((0, 0, 0), (1, -1, 1)))
    mixed = SceneSpec((Primitive("sphere", (0, 0, 1), (0.3,), material=Material(roughness=0.5)),
                       Primitive("sphere", (1, 0, 1), (0.3,), material=Material(roughness=2.0))))
    with pytest.raises(ValueError):
        mixed.roughness()


def test_trajectory_spec_validation():
    with pytest.raises(ValueError):
        TrajectorySpec(kind="spiral")
    with pytest.raises(ValueError):
        TrajectorySpec(speed=0.0)
    with pytest.raises(ValueError):
        TrajectorySpec(n_frames=2)


def test_scale_spec_scales_geometry():
    spec = SceneSpec((Primitive("box", (1.0, 0.5, 0.8), (0.8, 0.6, 0.7), shell=0.2),))
    big = scale_spec(spec, 2.0)
    assert big.primitives[0].center == pytest.approx(tuple(2 * c for c in spec.primitives[0].center))
    assert big.primitives[0].shell == pytest.approx(2 * spec.primitives[0].shell)
    assert np.asarray(big.bounds) == pytest.approx(2 * np.asarray(spec.bounds))


# --------------------------------------------------------------------------
# trajectories


@pytest.mark.parametrize("kind", ["orbit", "lawnmower", "random-walk"])
def test_trajectory_speed_bounded_away_from_zero(kind):
    spec = TrajectorySpec(kind=kind, n_frames=600, speed=1.0, seed=2)
    tr = make_trajectory(spec)
    speed = np.linalg.norm(tr.velocities, axis=1)
    assert speed.min() > 0.5 and speed.max() < 1.5
    # stored velocities agree with the positions they accompany
    fd = np.diff(tr.positions, axis=0) * spec.rate
    mid = 0.5 * (tr.velocities[1:] + tr.velocities[:-1])
    assert np.max(np.linalg.norm(fd - mid, axis=1)) < 0.05
    # unit quaternions, fixed rate
    np.testing.assert_allclose(np.linalg.norm(tr.rotations, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.diff(tr.timestamps), 1 / spec.rate)


def test_orbit_looks_towards_centre():
    tr = make_trajectory(TrajectorySpec(n_frames=50))
    w, z = tr.rotations[:, 0], tr.rotations[:, 3]
    yaw = 2 * np.arctan2(z, w)
    to_c = np.arctan2(-tr.positions[:, 1], -tr.positions[:, 0])
    off = np.degrees(np.abs(np.angle(np.exp(1j * (yaw - to_c)))))
    np.testing.assert_allclose(off, 20.0, atol=1e-6)


def test_trajectory_deterministic():
    a = make_trajectory(TrajectorySpec(kind="random-walk", n_frames=100, seed=4))
    b = make_trajectory(TrajectorySpec(kind="random-walk", n_frames=100, seed=4))
    c = make_trajectory(TrajectorySpec(kind="random-walk", n_frames=100, seed=5))
    assert np.array_equal(a.positions, b.positions)
    assert not np.allclose(a.positions, c.positions)


# --------------------------------------------------------------------------
# baking


def test_empty_spec_gives_zero_fields():
    baked = bake_scene(SceneSpec(), 16)
    assert baked.camera_alpha.max() == 0 and baked.radar_alpha.max() == 0
    x = torch.as_tensor(np.random.default_rng(0).uniform((-4, -4, 0), (4, 4, 3), (500, 3)), dtype=torch.float32)
    with torch.no_grad():
        a_c = baked.field.camera_geometry.alpha(x)
        a_r = baked.field.radar_geometry.alpha(x)
    assert float(a_c.max()) < 1e-5 and float(a_r.max()) < 1e-5


def test_unit_sphere_normal():
    spec = SceneSpec((Primitive("sphere", (0.0, 0.0, 0.0), (1.0,)),), bounds=((-2, -2, -2), (2, 2, 2)))
    res = 33
    baked = bake_scene(spec, res)
    voxel = 4.0 / (res - 1)
    node = np.array([1.0, 0.0, 0.0])
    ijk = np.round((node + 2) / voxel).astype(int)
    n = baked.normals[ijk[2], ijk[1], ijk[0]]
    angle = math.acos(float(np.clip(n @ np.array([1.0, 0.0, 0.0]), -1, 1)))
    assert angle <= math.atan(1.0 / 1.0 * voxel)
    with torch.no_grad():
        n_field = baked.field.normals(torch.tensor([[1.0, 0.0, 0.0]]))
    assert float(n_field[0, 0]) > 0.99


def test_coarse_grid_warns():
    spec = SceneSpec((Primitive("sphere", (0.0, 0.0, 1.0), (0.05,)),))
    with pytest.warns(UserWarning):
        bake_scene(spec, 8)


def test_alphas_independent_per_material():
    baked = bake_scene(tent_scene(), 48)
    # away from the far tails, where another primitive's soft occupancy can take over the max
    cloth = (baked.primitive_index == 0) & (baked.camera_alpha > 1e-3)
    assert cloth.any()
    # both occupancies share the cloth's soft indicator, scaled by the material alphas
    np.testing.assert_allclose(baked.radar_alpha[cloth] / baked.camera_alpha[cloth], 0.05 / 0.95, rtol=1e-9)
    assert baked.radar_alpha[cloth].max() <= 0.05


def test_tent_camera_stops_at_cloth_radar_reaches_target():
    baked = bake_scene(tent_scene(), 64)
    o = torch.tensor([[3.5, 0.0, 0.6], [0.0, -3.5, 0.6]])
    d = torch.tensor([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    with torch.no_grad():
        cam = render_camera_rays(baked.field, o, d, step=0.02, with_color=False)
        rad = render_camera_rays(baked.field, o, d, step=0.02, with_color=False,
                                 geometry=baked.field.radar_geometry)
    # cloth wall spans 0.65..0.95 m from the tent axis, the target face sits at 0.22 m
    assert np.all((cam.depth.numpy() > 3.5 - 1.0) & (cam.depth.numpy() < 3.5 - 0.6))
    assert float(cam.opacity.min()) > 0.9
    peak = rad.t.gather(1, rad.weights.argmax(1, keepdim=True))[:, 0].numpy()
    np.testing.assert_allclose(peak, 3.5 - 0.22, atol=0.1)
    assert float(rad.opacity.min()) > 0.9


def test_retro_plates_bake_with_low_roughness():
    spec = retro_plates_scene()
    baked = bake_scene(spec, 48)
    assert baked.field.config.roughnesses == (0.1,)
    assert (baked.primitive_index >= 0).any()


# --------------------------------------------------------------------------
# datasets


def test_same_seed_datasets_identical():
    assert _digest(tiny_dataset(seed=7)) == _digest(tiny_dataset(seed=7))
    assert _digest(tiny_dataset(seed=7)) != _digest(tiny_dataset(seed=8))


def test_zero_noise_dataset_against_itself():
    ds = tiny_dataset(noise_level=0.0)
    assert ds.noise is None
    for f, c in zip(ds.frames, ds.clean):
        np.testing.assert_array_equal(f.cube, c.astype(np.float32))
    x = ds.frames[5].cube / ds.frames[5].cube.max()
    for a in range(x.shape[-1]):
        assert masked_ssim(x[..., a], x[..., a]) == pytest.approx(1.0)


def test_dataset_trajectory_is_scaleless():
    a = tiny_dataset(true_scale=1.0, noise_level=0.0)
    b = tiny_dataset(true_scale=0.5, noise_level=0.0)
    np.testing.assert_allclose(b.trajectory.positions, 2 * a.trajectory.positions)
    np.testing.assert_allclose(b.speeds(), a.speeds())
    assert b.trajectory.scale == 1.0 and b.true_scale == 0.5
    assert np.asarray(b.bounds) == pytest.approx(2 * np.asarray(a.bounds))
    train, test = b.split()
    assert test == list(range(16, 20)) and train == list(range(16))


def test_noise_reproducible_and_matches_declared_parameters(tiny):
    again = tiny_dataset()
    noise = np.concatenate([(f.cube - c).ravel() for f, c in zip(tiny.frames, tiny.clean)])
    noise2 = np.concatenate([(f.cube - c).ravel() for f, c in zip(again.frames, again.clean)])
    assert np.array_equal(noise, noise2)
    assert noise.min() >= -1e-9
    m = fit_chi_square(noise.astype(np.float64))
    assert abs(m.dof - tiny.noise.dof) <= 0.1 * tiny.noise.dof
    assert m.scale == pytest.approx(tiny.noise.scale, rel=0.1)


def test_fit_noise_recovers_dof_from_frames():
    radar = replace(tiny_radar(), n_doppler=40)  # +-2 m/s: columns beyond the 1 m/s platform speed hold only noise
    ds = generate_dataset(general_scene(1), TrajectorySpec(n_frames=40), radar, CameraIntrinsics(8, 6), seed=11,
                          resolution=24)
    cubes = [f.cube.astype(np.float64) for f in ds.frames]
    m = fit_noise(cubes, ds.speeds() + 0.05, radar.dopplers().numpy())
    assert abs(m.dof - 4.0) <= 0.4

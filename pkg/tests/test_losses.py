import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from rdfield.geometry import Trajectory, TrajectoryParams
from rdfield.losses import (BCE_EPS, LossWeights, loss_bce_geometry, loss_interlevel, loss_normals,
                            loss_reconstruction, loss_ssim, pose_regularizers)
from rdfield.metrics import ssim_map
from rdfield.optim import Adam, LRSchedule
from rdfield.synth import TrajectorySpec, make_trajectory

# --------------------------------------------------------------------------
# weights


def test_default_weights():
    w = LossWeights()
    assert (w.r, w.bce, w.ssim, w.norm, w.prop_r) == (1e-3, 0.01, 0.01, 0.1, 1.0)
    assert (w.norm_g, w.norm_o, w.regp, w.regv, w.rega, w.regk) == (1e-3, 1e-4, 1e-3, 1.0, 5e-3, 1.0)
    assert LossWeights.indoor().r == 1e-4


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(bce=-1.0)


# --------------------------------------------------------------------------
# reconstruction


def test_reconstruction_examples(rng):
    y = torch.as_tensor(rng.random((4, 5, 3)))
    assert float(loss_reconstruction(y, y)) == 0.0
    assert float(loss_reconstruction(y, y + 0.2)) == pytest.approx(0.2)


def test_reconstruction_mask_matches_loop(rng):
    gt = rng.random((6, 7, 2))
    pred = rng.random((6, 7, 2))
    mask = rng.random((6, 7, 2)) < 0.5
    total, count = 0.0, 0
    for idx in np.ndindex(gt.shape):
        if mask[idx]:
            total += abs(pred[idx] - gt[idx])
            count += 1
    got = loss_reconstruction(torch.as_tensor(gt), torch.as_tensor(pred), torch.as_tensor(mask))
    assert float(got) == pytest.approx(total / count, rel=1e-12)


def test_reconstruction_shape_mismatch():
    with pytest.raises(ValueError):
        loss_reconstruction(torch.zeros(2, 3), torch.zeros(3, 2))


# --------------------------------------------------------------------------
# SSIM loss


def _blur_np(x):
    return gaussian_filter(x, sigma=1.5, truncate=5 / 1.5, mode="mirror")


def test_ssim_loss_identical_zero(rng):
    y = torch.as_tensor(rng.random((16, 12, 3)))
    assert float(loss_ssim(y, y)) == pytest.approx(0.0, abs=1e-12)


def test_ssim_loss_anticorrelated_checkerboard():
    i, j = np.indices((32, 32))
    board = ((i // 2 + j // 2) % 2).astype(np.float64)
    a = torch.as_tensor(board)
    loss = float(loss_ssim(a, 1 - a, cube=False))
    assert 1.95 < loss <= 2.0


def test_ssim_constant_shift_is_pure_luminance(rng):
    a = _blur_np(rng.random((32, 32))) * 0.6
    b = a + 0.2
    c1 = 0.01**2
    mu_a, mu_b = _blur_np(a), _blur_np(b)
    luminance = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    got = ssim_map(torch.as_tensor(a), torch.as_tensor(b)).numpy()
    np.testing.assert_allclose(got, luminance, rtol=1e-6, atol=1e-9)
    assert got.mean() < 1.0


# --------------------------------------------------------------------------
# geometry BCE


def test_bce_examples():
    half = torch.tensor([0.5], dtype=torch.float64)
    assert float(loss_bce_geometry(half, half)) == pytest.approx(math.log(2), rel=1e-12)
    one = torch.tensor([1.0], dtype=torch.float64)
    # both arguments are clamped to [eps, 1 - eps], leaving the binary entropy of 1 - eps
    assert float(loss_bce_geometry(one - BCE_EPS, one)) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.floats(0.02, 0.98), st.floats(0.0, 1.0))
def test_bce_gradient_pulls_towards_camera(a_r, a_c):
    if abs(a_r - a_c) < 1e-3:
        return
    x = torch.tensor([a_r], dtype=torch.float64, requires_grad=True)
    loss = loss_bce_geometry(x, torch.tensor([a_c], dtype=torch.float64))
    (g,) = torch.autograd.grad(loss, x)
    h = 1e-6
    fd = (float(loss_bce_geometry(x.detach() + h, torch.tensor([a_c], dtype=torch.float64))) -
          float(loss_bce_geometry(x.detach() - h, torch.tensor([a_c], dtype=torch.float64)))) / (2 * h)
    assert np.sign(float(g)) == np.sign(a_r - a_c) == np.sign(fd)


# --------------------------------------------------------------------------
# interlevel


def _overlap_bound(t_edges, p_edges, p_w):
    out = np.zeros(len(t_edges) - 1)
    for i in range(len(t_edges) - 1):
        for j in range(len(p_edges) - 1):
            if p_edges[j] < t_edges[i + 1] and p_edges[j + 1] > t_edges[i]:
                out[i] += p_w[j]
    return out


def _interlevel_brute(t_edges, w, p_edges, p_w, eps=1e-7):
    b = _overlap_bound(t_edges, p_edges, p_w)
    return float(np.sum(np.maximum(0, w - b) ** 2 / (w + eps)))


def _hist(rng, n, lo=0.0, hi=10.0):
    edges = np.sort(rng.uniform(lo, hi, n - 1))
    return np.concatenate([[lo], edges, [hi]])


def test_interlevel_identical_zero(rng):
    e = _hist(rng, 12)
    w = rng.random(12)
    t = torch.as_tensor
    assert float(loss_interlevel(t(e)[None], t(w)[None], t(e)[None], t(w)[None])) == 0.0


def test_interlevel_zero_proposal_is_sum_of_weights(rng):
    e = _hist(rng, 9)
    w = rng.random(9) + 0.1
    t = torch.as_tensor
    got = float(loss_interlevel(t(e)[None], t(w)[None], t(e)[None], torch.zeros(1, 9, dtype=torch.float64)))
    assert got == pytest.approx(w.sum(), rel=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_interlevel_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    te, pe = _hist(rng, int(rng.integers(3, 20))), _hist(rng, int(rng.integers(3, 20)))
    w = rng.random(len(te) - 1) * (rng.random(len(te) - 1) < 0.7)
    pw = rng.random(len(pe) - 1) * 0.3
    t = torch.as_tensor
    got = float(loss_interlevel(t(te)[None], t(w)[None], t(pe)[None], t(pw)[None]))
    assert got == pytest.approx(_interlevel_brute(te, w, pe, pw), rel=1e-9, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 16), st.integers(2, 16))
def test_interlevel_zero_when_dominated(seed, n, m):
    rng = np.random.default_rng(seed)
    te, pe = _hist(rng, n), _hist(rng, m)
    w = rng.random(n)
    # proposal weight on each interval at least the largest field weight it overlaps
    pw = np.array([max([w[i] for i in range(n) if te[i] < pe[j + 1] and te[i + 1] > pe[j]] + [0.0])
                   for j in range(m)])
    t = torch.as_tensor
    assert float(loss_interlevel(t(te)[None], t(w)[None], t(pe)[None], t(pw)[None])) == 0.0


def test_interlevel_treats_field_weights_as_constant(rng):
    e = torch.as_tensor(_hist(rng, 6))[None]
    w = torch.as_tensor(rng.random(6))[None].requires_grad_(True)
    pw = torch.zeros(1, 6, dtype=torch.float64, requires_grad=True)
    loss = loss_interlevel(e, w, e, pw)
    gw, gp = torch.autograd.grad(loss, [w, pw], allow_unused=True)
    assert gw is None and float(gp.abs().sum()) > 0


def test_interlevel_empty_histogram_error():
    with pytest.raises(ValueError):
        loss_interlevel(torch.zeros(1, 1), torch.zeros(1, 0), torch.zeros(1, 2), torch.zeros(1, 1))


# --------------------------------------------------------------------------
# normals


def test_normal_loss_examples():
    n = torch.tensor([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
    assert float(loss_normals(n, n)[0]) == 0.0
    assert float(loss_normals(n, -n)[0]) == pytest.approx(4.0)
    # back-facing normal with n . omega = 0.5 and weight 1
    n1 = torch.tensor([[[0.5, math.sqrt(0.75), 0.0]]], dtype=torch.float64)
    omega = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    _, _, l_o = loss_normals(n1, None, torch.ones(1, 1, dtype=torch.float64), None, omega)
    assert float(l_o) == pytest.approx(0.25)
    _, _, l_o = loss_normals(-n1, None, torch.ones(1, 1, dtype=torch.float64), None, omega)
    assert float(l_o) == 0.0
    _, l_g, _ = loss_normals(n1, None, torch.full((1, 1), 0.5, dtype=torch.float64), -n1)
    assert float(l_g) == pytest.approx(2.0)


# --------------------------------------------------------------------------
# pose regularisers


def _line_trajectory(n=20, v=(0.5, -0.2, 0.1)):
    t = np.arange(n) / 10.0
    v = np.asarray(v)
    pos = t[:, None] * v[None]
    q = np.tile([1.0, 0, 0, 0], (n, 1))
    return Trajectory(t, q, pos, np.tile(v, (n, 1)), 1.0)


def test_pose_regularizers_zero_on_consistent_trajectory():
    tp = TrajectoryParams(_line_trajectory(), dtype=torch.float64)
    l_p, l_v, l_a, l_k = pose_regularizers(tp)
    assert float(l_p) == 0.0
    assert float(l_v) < 1e-24 and float(l_a) < 1e-24 and float(l_k) < 1e-24


def test_pose_regularizer_acceleration_zero_for_constant_velocity():
    tr = _line_trajectory()
    tp = TrajectoryParams(tr, dtype=torch.float64)
    with torch.no_grad():
        tp.offsets[:, 0:3] = 0.05  # position offsets do not affect the velocity terms
    assert float(pose_regularizers(tp)[2]) < 1e-24


def test_pose_regularizers_need_three_frames():
    tr = _line_trajectory(2)
    with pytest.raises(ValueError):
        pose_regularizers(TrajectoryParams(tr, dtype=torch.float64))


def test_pose_regularizers_recover_injected_velocity_noise():
    """Noisy velocity estimates on a smooth orbit: the regularisers alone learn offsets that undo the noise."""
    tr = make_trajectory(TrajectorySpec(n_frames=300))
    rng = np.random.default_rng(0)
    noise = rng.normal(0, 0.05, tr.velocities.shape)
    noisy = Trajectory(tr.timestamps, tr.rotations, tr.positions, tr.velocities + noise, 1.0)
    tp = TrajectoryParams(noisy, dtype=torch.float64)
    w = LossWeights()
    opt = Adam({"pose": ([tp.offsets], LRSchedule(1e-2, 1e-4, 3000))})
    for _ in range(3000):
        opt.zero_grad()
        l_p, l_v, l_a, l_k = pose_regularizers(tp)
        (w.regp * l_p + w.regv * l_v + w.rega * l_a + w.regk * l_k).backward()
        opt.step()
    off = tp.offsets.detach().numpy()
    residual = np.linalg.norm(off[:, 6:9] + noise) / np.linalg.norm(noise)
    assert residual <= 0.2

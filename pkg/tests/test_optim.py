import pytest
import torch

from rdfield.optim import Adam, LRSchedule


def _params(rng):
    return [torch.nn.Parameter(torch.as_tensor(rng.normal(size=s))) for s in ((3, 4), (5,))]


def test_zero_gradient_step_is_noop(rng):
    ps = _params(rng)
    before = [p.detach().clone() for p in ps]
    opt = Adam({"a": (ps, LRSchedule(1e-2))})
    for p in ps:
        p.grad = torch.zeros_like(p)
    opt.step()
    for p, b in zip(ps, before):
        assert torch.equal(p.detach(), b)


def test_matches_reference_adam(rng):
    ps = _params(rng)
    ref = [torch.nn.Parameter(p.detach().clone()) for p in ps]
    opt = Adam({"a": (ps, LRSchedule(3e-2))})
    ref_opt = torch.optim.Adam(ref, lr=3e-2, betas=(0.9, 0.999), eps=1e-8)
    target = [torch.as_tensor(rng.normal(size=p.shape)) for p in ps]
    for _ in range(25):
        for group, o in ((ps, opt), (ref, ref_opt)):
            o.zero_grad()
            sum(((p - t) ** 4).sum() for p, t in zip(group, target)).backward()
            o.step()
    for p, r in zip(ps, ref):
        torch.testing.assert_close(p.detach(), r.detach(), rtol=1e-10, atol=1e-12)


def test_moments_match_parameters(rng):
    ps = _params(rng)
    frozen = torch.nn.Parameter(torch.zeros(2), requires_grad=False)
    opt = Adam({"a": (ps + [frozen], LRSchedule(1e-2))})
    assert [m.shape for m in opt.m["a"]] == [p.shape for p in ps]
    assert sum(m.numel() for m in opt.v["a"]) == sum(p.numel() for p in ps)


def test_schedule_endpoints():
    s = LRSchedule(1e-2, 1e-4, 100)
    assert s(0) == pytest.approx(1e-2)
    assert s(50) == pytest.approx(1e-3)
    assert s(100) == pytest.approx(1e-4) and s(500) == pytest.approx(1e-4)
    assert LRSchedule(0.1)(1000) == 0.1


def test_group_learning_rates(rng):
    a, b = _params(rng)
    opt = Adam({"radar": ([a], LRSchedule(1e-2, 1e-4, 10)), "pose": ([b], LRSchedule(1e-3, 1e-4, 10))})
    assert opt.lr("radar") == pytest.approx(1e-2) and opt.lr("pose") == pytest.approx(1e-3)


def test_state_roundtrip(rng):
    ps = _params(rng)
    opt = Adam({"a": (ps, LRSchedule(1e-2))})
    for _ in range(3):
        opt.zero_grad()
        sum((p**2).sum() for p in ps).backward()
        opt.step()
    state = opt.state_dict()
    clone = Adam({"a": ([torch.nn.Parameter(p.detach().clone()) for p in ps], LRSchedule(1e-2))})
    clone.load_state_dict(state)
    assert clone.step_count == 3
    for x, y in zip(clone.m["a"] + clone.v["a"], opt.m["a"] + opt.v["a"]):
        assert torch.equal(x, y)

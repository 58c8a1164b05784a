"""Adam with per-group exponentially annealed learning rates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import torch


@dataclass
class LRSchedule:
    """lr(step) = lr_init * (lr_final / lr_init) ** (step / total), held at lr_final afterwards."""

    lr_init: float
    lr_final: float | None = None
    total: int = 1

    def __call__(self, step: int) -> float:
        if self.lr_final is None or self.total <= 0:
            return self.lr_init
        u = min(max(step / self.total, 0.0), 1.0)
        return self.lr_init * math.exp(u * math.log(self.lr_final / self.lr_init))


class Adam:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) over named parameter groups."""

    def __init__(self, groups: dict[str, tuple[Iterable[torch.Tensor], LRSchedule]],
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = {}
        for name, (params, sched) in groups.items():
            params = [p for p in params if p.requires_grad]
            self.groups[name] = (params, sched)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: [torch.zeros_like(p) for p in ps] for name, (ps, _) in self.groups.items()}
        self.v = {name: [torch.zeros_like(p) for p in ps] for name, (ps, _) in self.groups.items()}

    def parameters(self) -> list[torch.Tensor]:
        return [p for ps, _ in self.groups.values() for p in ps]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def lr(self, name: str) -> float:
        return self.groups[name][1](self.step_count)

    @torch.no_grad()
    def step(self) -> None:
        b1, b2 = self.beta1, self.beta2
        t = self.step_count + 1
        for name, (params, sched) in self.groups.items():
            lr = sched(self.step_count)
            for p, m, v in zip(params, self.m[name], self.v[name]):
                if p.grad is None:
                    continue
                g = p.grad
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                p.sub_(lr * m_hat / (v_hat.sqrt() + self.eps))
        self.step_count = t

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": {k: [x.clone() for x in v] for k, v in self.m.items()},
            "v": {k: [x.clone() for x in v] for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for k in self.m:
            for dst, src in zip(self.m[k], state["m"][k]):
                dst.copy_(src)
            for dst, src in zip(self.v[k], state["v"][k]):
                dst.copy_(src)

"""Proposal occupancy grids and hierarchical inverse-CDF ray sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .field import MultiResGrid


class ProposalField(nn.Module):
    """Coarse occupancy grids, one per sampling stage (coarse to fine)."""

    def __init__(self, bounds, resolutions: Sequence[int] = (32, 64), samples: Sequence[int] = (48, 32),
                 bias: float = -4.0, generator: torch.Generator | None = None):
        super().__init__()
        if len(resolutions) != len(samples):
            raise ValueError("one sample count per proposal stage")
        self.stages = nn.ModuleList([MultiResGrid(bounds, [r], 1, 1e-4, generator) for r in resolutions])
        self.samples = [int(s) for s in samples]
        self.bias = float(bias)

    def alpha(self, stage: int, x: torch.Tensor) -> torch.Tensor:
        grid = self.stages[stage]
        f = grid(x).squeeze(-1)
        return torch.sigmoid(f + self.bias) * grid.inside(x).to(f.dtype)


@dataclass
class ProposalSamples:
    t: torch.Tensor  # (R, n) sorted, detached
    histograms: list  # [(edges (R, m+1), weights (R, m))] per stage, differentiable in the proposal


def render_weights(alpha: torch.Tensor) -> torch.Tensor:
    """alpha_i * prod_{j<i} (1 - alpha_j) along the last axis."""
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[..., :1]), 1 - alpha[..., :-1]], -1), -1)
    return alpha * trans


def sample_pdf(edges: torch.Tensor, weights: torch.Tensor, n: int, generator: torch.Generator | None,
               padding: float = 0.01) -> torch.Tensor:
    """Stratified inverse-CDF samples from a piecewise-constant density.

    ``padding`` is the fraction of uniform mass mixed in; histograms with no
    mass fall back to uniform.
    """
    w = weights.detach().clamp_min(0)
    total = w.sum(-1, keepdim=True)
    lengths = (edges[..., 1:] - edges[..., :-1]).clamp_min(0)
    uniform = lengths / lengths.sum(-1, keepdim=True).clamp_min(1e-12)
    pdf = torch.where(total > 1e-8, w / total.clamp_min(1e-12), uniform)
    pdf = (1 - padding) * pdf + padding * uniform
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, -1)], -1)
    cdf = cdf / cdf[..., -1:]
    base = torch.arange(n, dtype=edges.dtype, device=edges.device)
    if generator is None:
        jitter = torch.full(edges.shape[:-1] + (n,), 0.5, dtype=edges.dtype)
    else:
        jitter = torch.rand(edges.shape[:-1] + (n,), generator=generator).to(edges.dtype)
    u = ((base + jitter) / n).clamp(0, 1 - 1e-7).contiguous()
    idx = torch.searchsorted(cdf.contiguous(), u, right=True).clamp(1, cdf.shape[-1] - 1)
    c0 = torch.gather(cdf, -1, idx - 1)
    c1 = torch.gather(cdf, -1, idx)
    e0 = torch.gather(edges, -1, idx - 1)
    e1 = torch.gather(edges, -1, idx)
    frac = ((u - c0) / (c1 - c0).clamp_min(1e-12)).clamp(0, 1)
    return (e0 + frac * (e1 - e0)).detach()


def proposal_sample(proposal: ProposalField, origins: torch.Tensor, directions: torch.Tensor,
                    near: torch.Tensor, far: torch.Tensor, n: int,
                    generator: torch.Generator | None = None, step_scale=1.0,
                    padding: float = 0.01) -> ProposalSamples:
    """Sorted ray distances drawn from the proposal's rendering-weight distribution.

    Field-space points are ``origins + step_scale * t * directions``;
    ``step_scale`` converts ray distance into field units (1 / scene scale
    for metric radar ranges).
    """
    near = near.detach()
    far = far.detach()
    steps = torch.linspace(0, 1, proposal.samples[0] + 1, dtype=origins.dtype)
    edges = near[:, None] + (far - near)[:, None] * steps
    histograms = []
    k = torch.as_tensor(step_scale, dtype=origins.dtype).detach()
    for s in range(len(proposal.stages)):
        mids = 0.5 * (edges[:, 1:] + edges[:, :-1])
        pts = origins.detach()[:, None, :] + k * mids[..., None] * directions.detach()[:, None, :]
        alpha = proposal.alpha(s, pts)
        w = render_weights(alpha)
        histograms.append((edges, w))
        if s + 1 < len(proposal.stages):
            nxt = sample_pdf(edges, w, proposal.samples[s + 1] + 1, generator, padding)
            nxt, _ = torch.sort(nxt, -1)
            nxt[:, 0] = near
            nxt[:, -1] = far
            edges = nxt
    t = sample_pdf(edges, histograms[-1][1], n, generator, padding)
    t, _ = torch.sort(t, -1)
    return ProposalSamples(t, histograms)


def interval_bound(t_edges: torch.Tensor, p_edges: torch.Tensor, p_weights: torch.Tensor) -> torch.Tensor:
    """Sum of proposal weights over proposal intervals overlapping each target interval.

    The overlapping weights are gathered and summed directly (no cumulative-sum
    differences), so a bound that contains a dominating weight is never below it.
    """
    lo = t_edges[..., :-1].contiguous()
    hi = t_edges[..., 1:].contiguous()
    m = p_weights.shape[-1]
    # first proposal interval whose right edge is > lo, last whose left edge is < hi
    j0 = torch.searchsorted(p_edges[..., 1:].contiguous(), lo, right=True).clamp(0, m)
    j1 = (torch.searchsorted(p_edges[..., :-1].contiguous(), hi, right=False) - 1).clamp(-1, m - 1)
    count = (j1 - j0 + 1).clamp_min(0)
    k_max = int(count.max()) if count.numel() else 0
    out = torch.zeros(lo.shape, dtype=p_weights.dtype)
    for k in range(k_max):  # one gather per overlap slot keeps memory at (rays, intervals)
        take = k < count
        idx = (j0 + k).clamp(0, m - 1)
        out = out + torch.where(take, torch.gather(p_weights, -1, idx), torch.zeros_like(out))
    return out


def loss_interlevel(t_edges: torch.Tensor, w: torch.Tensor, p_edges: torch.Tensor, p_weights: torch.Tensor,
                    eps: float = 1e-7) -> torch.Tensor:
    """Penalty on proposal histograms that under-estimate the field's weights.

    sum_i max(0, w_i - bound_i)^2 / w_i, averaged over rays; ``w`` is a constant target.
    """
    if w.shape[-1] == 0 or p_weights.shape[-1] == 0:
        raise ValueError("empty histogram")
    w = w.detach()
    bound = interval_bound(t_edges.detach(), p_edges.detach(), p_weights)
    per = torch.clamp(w - bound, min=0) ** 2 / (w + eps)
    return per.sum(-1).mean()

"""Central finite-difference verification of the composed training objective.

The analytic side is one backward pass; the numeric side re-evaluates the loss
at theta +/- h for every scalar parameter with all noise replayed, at float64.
Kept free of autograd internals so the two routes stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import Config
from .dse import DseNoise
from .fusion import Batch, DCLModel
from .synthdata import generate_dataset


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_params: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _loss_value(model: DCLModel, batch: Batch, dse_noise, cf_noise) -> torch.Tensor:
    out = model(batch, sample_latents=True, dse_noise=dse_noise, cf_noise=cf_noise)
    return out.breakdown.total


def analytic_gradients(model: DCLModel, batch: Batch, dse_noise, cf_noise) -> dict:
    model.zero_grad()
    loss = _loss_value(model, batch, dse_noise, cf_noise)
    loss.backward()
    return {name: (torch.zeros_like(p) if p.grad is None else p.grad.clone())
            for name, p in model.named_parameters()}


def finite_difference_gradients(model: DCLModel, batch: Batch, dse_noise, cf_noise,
                                rel_step: float = 1e-5) -> dict:
    grads = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                h = rel_step * max(1.0, abs(orig))
                flat[i] = orig + h
                up = _loss_value(model, batch, dse_noise, cf_noise).item()
                flat[i] = orig - h
                down = _loss_value(model, batch, dse_noise, cf_noise).item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads[name] = g
    return grads


def compare(analytic: dict, numeric: dict) -> GradCheckReport:
    worst, worst_name, total = 0.0, "", 0
    for name in analytic:
        a, b = analytic[name].view(-1), numeric[name].view(-1)
        denom = torch.maximum(torch.maximum(a.abs(), b.abs()),
                              torch.full_like(a, 1e-3))
        rel = ((a - b).abs() / denom).max().item()
        total += a.numel()
        if rel > worst:
            worst, worst_name = rel, name
    return GradCheckReport(worst, worst_name, total)


def run_gradcheck(config: Config | None = None, mode: str = "dse_a_c",
                  seed: int = 0) -> GradCheckReport:
    """Build the small float64 model on synthetic data and compare both routes."""
    config = config or Config.tiny()
    torch.manual_seed(seed)
    model = DCLModel(config, mode).double()
    data = generate_dataset(config, seed)
    batch = Batch.from_samples(data.train[:config.batch], data.precomputed,
                               dtype=torch.float64)

    generator = torch.Generator().manual_seed(seed + 1)
    N, T = 2 * len(batch), config.T
    dse_noise = DseNoise.draw(N, T, config.d_s, config.d_z, generator,
                              dtype=torch.float64)
    dim = config.d + config.d_s + config.d_z
    cf_noise = torch.randn(config.cf_samples_train, N, dim, generator=generator,
                           dtype=torch.float64)

    # settle the data-dependent intervention init before measuring
    with torch.no_grad():
        _loss_value(model, batch, dse_noise, cf_noise)

    analytic = analytic_gradients(model, batch, dse_noise, cf_noise)
    numeric = finite_difference_gradients(model, batch, dse_noise, cf_noise)
    return compare(analytic, numeric)

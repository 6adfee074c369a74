"""Cross-sample affinity graphs and counterfactual interventions.

For each modality block (audio, static factor, time-pooled dynamic factor) we
build an N x N affinity over the batch: exponentiated cosine similarities,
top-k sparsified per row, then row-normalized to a stochastic matrix. Message
passing multiplies each block by its own affinity. The counterfactual pass
rebuilds the affinities from Gaussian-sampled surrogate features while the
real features stay fixed; the total indirect effect is the factual prediction
minus the mean counterfactual prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModalBlocks:
    audio: torch.Tensor  # (N, d)
    static: torch.Tensor  # (N, d_s)
    dynamic: torch.Tensor  # (N, d_z)

    def cat(self) -> torch.Tensor:
        return torch.cat([self.audio, self.static, self.dynamic], dim=-1)

    @property
    def n(self) -> int:
        return self.audio.shape[0]

    def split_like(self, flat: torch.Tensor) -> "ModalBlocks":
        """Split an (N, d + d_s + d_z) matrix back into blocks."""
        d, d_s = self.audio.shape[1], self.static.shape[1]
        return ModalBlocks(flat[:, :d], flat[:, d:d + d_s], flat[:, d + d_s:])


@dataclass
class AffinityMatrix:
    """Row-stochastic sparse affinity.

    `values` is the dense matrix. `neighbors`/`weights`, when present, list
    each row's nonzero entries in descending-value order; keeping that
    canonical order makes downstream sums independent of how the batch was
    ordered, so permuting the batch permutes results bit-exactly.
    """

    values: torch.Tensor  # (N, N), rows sum to 1
    k: int
    degenerate_rows: int = 0  # rows that fell back to a self-loop
    neighbors: torch.Tensor | None = None  # (N, m) column indices, rank order
    weights: torch.Tensor | None = None  # (N, m) aligned with neighbors


def pool_dynamic(z: torch.Tensor) -> torch.Tensor:
    """(.., T, d_z) -> (.., d_z), arithmetic mean over time."""
    if z.shape[-2] == 0:
        raise ValueError("cannot pool an empty time axis")
    return z.mean(-2)


def similarity_matrix(rows: torch.Tensor, tau_aff: float) -> torch.Tensor:
    """exp(cosine / tau): symmetric, positive, scale-invariant per row."""
    if tau_aff <= 0:
        raise ValueError("tau_aff must be > 0")
    norms = rows.norm(dim=-1)
    if (norms == 0).any():
        bad = int((norms == 0).nonzero()[0])
        raise ValueError(f"zero-norm feature row {bad}: cosine similarity undefined")
    unit = rows / norms.unsqueeze(-1)
    return torch.exp((unit @ unit.T) / tau_aff)


def topk_filter(S: torch.Tensor, k: int) -> torch.Tensor:
    """Zero everything outside each row's k largest entries.

    Ties break toward the lowest column index, so runs are reproducible.
    """
    n = S.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    order = torch.argsort(S, dim=1, descending=True, stable=True)
    mask = torch.zeros_like(S, dtype=torch.bool).scatter_(1, order[:, :k], True)
    return S * mask


def row_normalize(S: torch.Tensor) -> AffinityMatrix:
    """Divide each row by its sum; all-zero rows fall back to a self-loop.

    Sums accumulate over entries sorted by descending value, so the result
    does not depend on the column order the batch happened to arrive in.
    """
    if (S < 0).any():
        raise ValueError("row_normalize expects nonnegative entries")
    n = S.shape[0]
    dead = S.sum(1) == 0
    n_dead = int(dead.sum())
    if n_dead:
        S = S + torch.eye(n, dtype=S.dtype, device=S.device) * dead.unsqueeze(1)
    sorted_vals, order = torch.sort(S, dim=1, descending=True, stable=True)
    m = max(1, int((S != 0).sum(1).max()))
    neighbors = order[:, :m]
    sums = sorted_vals[:, :m].sum(1, keepdim=True)
    weights = sorted_vals[:, :m] / sums
    values = torch.zeros_like(S).scatter(1, neighbors, weights)
    return AffinityMatrix(values=values, k=S.shape[1], degenerate_rows=n_dead,
                          neighbors=neighbors, weights=weights)


def build_affinities(blocks: ModalBlocks, tau_aff: float, k: int):
    """Per-modality affinity matrices (audio, static, dynamic)."""
    def affinity(rows):
        out = row_normalize(topk_filter(similarity_matrix(rows, tau_aff), k))
        out.k = k
        return out

    return affinity(blocks.audio), affinity(blocks.static), affinity(blocks.dynamic)


def _mix(affinity: AffinityMatrix, rows: torch.Tensor) -> torch.Tensor:
    if affinity.neighbors is None:
        return affinity.values @ rows
    # accumulate neighbors in rank order: batch-order independent and O(N k d)
    out = torch.zeros_like(rows)
    for r in range(affinity.neighbors.shape[1]):
        out = out + affinity.weights[:, r:r + 1] * rows[affinity.neighbors[:, r]]
    return out


def transfer(affinities, blocks: ModalBlocks) -> torch.Tensor:
    """Blockwise message passing: each modality mixed by its own affinity.

    Returns (N, d + d_s + d_z) rows, one transferred feature per sample.
    """
    a_audio, a_static, a_dynamic = affinities
    return torch.cat([
        _mix(a_audio, blocks.audio),
        _mix(a_static, blocks.static),
        _mix(a_dynamic, blocks.dynamic),
    ], dim=-1)


def intervene(x_mu: torch.Tensor, x_sigma: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Surrogate features x_sigma * W + x_mu (shapes broadcast against W)."""
    if (x_sigma < 0).any():
        raise ValueError("x_sigma must be nonnegative")
    try:
        return x_sigma * noise + x_mu
    except RuntimeError as e:
        raise ValueError(f"intervention shapes do not broadcast: {e}") from e


def tie(y_factual: torch.Tensor, y_counterfactual) -> torch.Tensor:
    """Total indirect effect: factual logits minus mean counterfactual logits."""
    if torch.is_tensor(y_counterfactual):
        y_counterfactual = [y_counterfactual]
    if len(y_counterfactual) == 0:
        raise ValueError("need at least one counterfactual prediction")
    return y_factual - torch.stack(list(y_counterfactual)).mean(0)


class InterventionParams(nn.Module):
    """Learned per-dimension mean and scale of the surrogate feature sampler.

    Initialized lazily from the first batch's mean and standard deviation;
    the scale is kept nonnegative through a softplus.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(dim))
        self.raw_sigma = nn.Parameter(torch.zeros(dim))
        self.register_buffer("initialized", torch.tensor(False))

    @property
    def sigma(self) -> torch.Tensor:
        return F.softplus(self.raw_sigma)

    @torch.no_grad()
    def initialize_from(self, features: torch.Tensor) -> None:
        std = features.std(0, unbiased=False).clamp_min(1e-3)
        self.mu.copy_(features.mean(0))
        # softplus inverse so that sigma starts at the batch std
        self.raw_sigma.copy_(std + torch.log(-torch.expm1(-std)))
        self.initialized.fill_(True)

    def sample(self, n: int, noise: torch.Tensor) -> torch.Tensor:
        if noise.shape != (n, self.mu.shape[0]):
            raise ValueError(f"noise shape {tuple(noise.shape)} != ({n}, {self.mu.shape[0]})")
        return intervene(self.mu, self.sigma, noise)

"""Disentangled sequential encoder: static/dynamic factorization of sequences.

A bidirectional LSTM reads the whole feature sequence. The static factor s is
a diagonal Gaussian computed from time-pooled hidden states; the dynamic
factor z_t at each step is a diagonal Gaussian conditioned on the hidden state
at t and on the previously *sampled* z_{<t} (ancestral rollout, with z_0 = 0).
The prior over s is N(0, I); the prior over z_t is produced by a causal LSTM
over z_{<t}. Frames decode independently from (s, z_t), so the decoder
Jacobian of frame t with respect to z_{t'} vanishes for t' != t.

Contrastive terms pair each clip with an augmented view of itself: time
shuffling keeps static content, feature-axis Gaussian blur keeps motion. The
loss is reconstruction + weighted KLs, minus the two latent/view mutual
information estimates, plus a cross term that pushes z and s apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config
from .errors import NumericError


@dataclass
class GaussianParams:
    """Diagonal Gaussian as (mean, log variance), broadcastable shapes."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != log_var shape {tuple(self.log_var.shape)}"
            )

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)

    def standard_like(self) -> "GaussianParams":
        return GaussianParams(torch.zeros_like(self.mean), torch.zeros_like(self.log_var))


@dataclass
class StaticFactor:
    sample: torch.Tensor  # (N, d_s)
    posterior: GaussianParams


@dataclass
class DynamicFactors:
    samples: torch.Tensor  # (N, T, d_z)
    posteriors: GaussianParams  # mean/log_var of shape (N, T, d_z)

    @property
    def z0(self) -> torch.Tensor:
        """The fixed all-zeros start step the rollout conditions on."""
        return torch.zeros_like(self.samples[:, 0])


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    kl_s: torch.Tensor
    kl_z: torch.Tensor
    mi_z_x: torch.Tensor
    mi_s_x: torch.Tensor
    mi_z_s: torch.Tensor
    cls: torch.Tensor = field(default_factory=lambda: torch.tensor(0.0))
    total: torch.Tensor = field(default_factory=lambda: torch.tensor(0.0))

    def to_dict(self) -> dict:
        fields = ("recon", "kl_s", "kl_z", "mi_z_x", "mi_s_x", "mi_z_s", "cls", "total")
        return {k: float(getattr(self, k).detach()) for k in fields}


def reparameterize(p: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    """mean + std * noise; differentiable in the parameters.

    The noise must match the parameter dimensionality; leading batch axes
    broadcast, so one parameter set can serve many draws.
    """
    if noise.shape[-1] != p.mean.shape[-1]:
        raise ValueError(f"noise length {noise.shape[-1]} != mean length {p.mean.shape[-1]}")
    return p.mean + p.std * noise


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over the last dim."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError("q and p have different dimensionality")
    var_ratio = torch.exp(q.log_var - p.log_var)
    mean_term = (q.mean - p.mean) ** 2 / torch.exp(p.log_var)
    return 0.5 * (p.log_var - q.log_var + var_ratio + mean_term - 1.0).sum(-1)


# ---------------------------------------------------------------------------
# augmentations for the contrastive terms
# ---------------------------------------------------------------------------

def augment_content(x: torch.Tensor, perm_seed) -> torch.Tensor:
    """Shuffle time steps (preserves the frame multiset, hence static content).

    `perm_seed` is either an int seeding the permutation or an explicit index
    tensor of length T.
    """
    T = x.shape[-2]
    if torch.is_tensor(perm_seed):
        perm = perm_seed
    else:
        g = torch.Generator().manual_seed(int(perm_seed))
        perm = torch.randperm(T, generator=g)
    return x.index_select(-2, perm.to(x.device))


def augment_motion(x: torch.Tensor, blur_width: float) -> torch.Tensor:
    """Gaussian blur along the feature axis; time order untouched."""
    if blur_width <= 0:
        raise ValueError("blur_width must be > 0")
    d = x.shape[-1]
    radius = min(max(1, int(math.ceil(3 * blur_width))), d - 1)
    coords = torch.arange(-radius, radius + 1, dtype=x.dtype, device=x.device)
    kernel = torch.exp(-0.5 * (coords / blur_width) ** 2)
    kernel = kernel / kernel.sum()
    flat = x.reshape(-1, 1, d)
    padded = F.pad(flat, (radius, radius), mode="reflect")
    out = F.conv1d(padded, kernel.view(1, 1, -1))
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# contrastive mutual information estimation
# ---------------------------------------------------------------------------

def _safe_normalize(v: torch.Tensor, what: str) -> torch.Tensor:
    norms = v.norm(dim=-1)
    if (norms == 0).any():
        raise ValueError(f"zero-norm vector in {what}: cosine similarity undefined")
    return v / norms.unsqueeze(-1)

def contrastive_term(anchor: torch.Tensor, positive: torch.Tensor,
                     negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """log of the softmax ratio exp(cos(a,p)/tau) / (pos + sum over negatives).

    Always strictly negative; equals log(1/(n+1)) when every similarity ties.
    """
    if negatives.ndim != 2 or negatives.shape[0] < 1:
        raise ValueError("need at least one negative")
    a = _safe_normalize(anchor, "anchor")
    p = _safe_normalize(positive, "positive")
    n = _safe_normalize(negatives, "negatives")
    logits = torch.cat([(a * p).sum(-1, keepdim=True), n @ a]) / tau
    return logits[0] - torch.logsumexp(logits, dim=0)


def _negative_index(n: int, n_max: int, device) -> torch.Tensor:
    """(n, m) index matrix: for each anchor, the first m other positions."""
    if n < 2:
        raise ValueError("need a batch of at least 2 for contrastive negatives")
    m = min(n - 1, n_max)
    base = torch.arange(n - 1, device=device).expand(n, n - 1)
    rows = torch.arange(n, device=device).unsqueeze(1)
    return (base + (base >= rows)).long()[:, :m]


def _batch_contrastive(anchors, positives, negatives_pool, tau, n_max, what):
    """Mean contrastive term over the batch; negatives drawn from a pool."""
    a = _safe_normalize(anchors, what)
    p = _safe_normalize(positives, what)
    pool = _safe_normalize(negatives_pool, what)
    idx = _negative_index(a.shape[0], n_max, a.device)
    pos = (a * p).sum(-1, keepdim=True)  # (N, 1)
    neg = (a @ pool.T).gather(1, idx)  # (N, m)
    logits = torch.cat([pos, neg], dim=1) / tau
    return (logits[:, 0] - torch.logsumexp(logits, dim=1)).mean()


def mutual_information(z: torch.Tensor, s: torch.Tensor,
                       z_aug: torch.Tensor, s_aug: torch.Tensor,
                       tau: float, n_max: int):
    """Contrastive MI estimates (mi_z_x, mi_s_x, mi_z_s), each <= 0.

    Latent/input MI is approximated by averaging the raw-anchored and
    augmented-anchored softmax ratios; the latent cross term anchors pooled z
    against the same clip's s.
    """
    zf, zaf = z.flatten(1), z_aug.flatten(1)
    c_z = _batch_contrastive(zf, zaf, zf, tau, n_max, "dynamic factors")
    c_z_aug = _batch_contrastive(zaf, zf, zaf, tau, n_max, "dynamic factors")
    c_s = _batch_contrastive(s, s_aug, s, tau, n_max, "static factors")
    c_s_aug = _batch_contrastive(s_aug, s, s_aug, tau, n_max, "static factors")
    mi_z_x = 0.5 * (c_z + c_z_aug)
    mi_s_x = 0.5 * (c_s + c_s_aug)
    mi_z_s = _batch_contrastive(z.mean(1), s, s, tau, n_max, "latent cross term")
    return mi_z_x, mi_s_x, mi_z_s


# ---------------------------------------------------------------------------
# the sequence VAE
# ---------------------------------------------------------------------------

class SequenceVAE(nn.Module):
    def __init__(self, config: Config):
        super().__init__()
        self.config = config
        h = config.hidden
        self.bilstm = nn.LSTM(config.d, h, batch_first=True, bidirectional=True)
        self.static_head = nn.Linear(2 * h, 2 * config.d_s)
        self.dyn_cell = nn.LSTMCell(2 * h + config.d_z, h)
        self.dyn_head = nn.Linear(h, 2 * config.d_z)
        self.prior_cell = nn.LSTMCell(config.d_z, h)
        self.prior_head = nn.Linear(h, 2 * config.d_z)
        self.dec_hidden = nn.Linear(config.d_s + config.d_z, h)
        self.dec_out = nn.Linear(h, config.d)

    def _hidden(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.bilstm(x)  # (N, T, 2h)
        bad = ~torch.isfinite(out).all(-1).all(0)
        if bad.any():
            raise NumericError(f"non-finite encoder activations at step {int(bad.nonzero()[0])}")
        return out

    def static_posterior(self, x: torch.Tensor) -> GaussianParams:
        """q(s | x_{1:T}) from a time-pooled bidirectional pass."""
        pooled = self._hidden(x).mean(1)
        mean, log_var = self.static_head(pooled).chunk(2, dim=-1)
        return GaussianParams(mean, log_var)

    def _dynamic_rollout(self, hidden: torch.Tensor, noise_z: torch.Tensor):
        """Ancestral sampling of z_{1:T}; step t sees hidden_t and sampled z_{<t}.

        Hidden states are centered over time before entering the dynamic cell:
        the time-mean component belongs to the static pathway, and routing only
        temporal deviations here keeps time-invariant content out of z.
        """
        N, T, _ = hidden.shape
        d_z = self.config.d_z
        hidden = hidden - hidden.mean(1, keepdim=True)
        z_prev = hidden.new_zeros(N, d_z)  # z_0 = 0
        hx = hidden.new_zeros(N, self.config.hidden)
        cx = torch.zeros_like(hx)
        means, log_vars, samples = [], [], []
        for t in range(T):
            hx, cx = self.dyn_cell(torch.cat([hidden[:, t], z_prev], dim=-1), (hx, cx))
            mean, log_var = self.dyn_head(hx).chunk(2, dim=-1)
            z_t = mean + torch.exp(0.5 * log_var) * noise_z[:, t]
            means.append(mean)
            log_vars.append(log_var)
            samples.append(z_t)
            z_prev = z_t
        post = GaussianParams(torch.stack(means, 1), torch.stack(log_vars, 1))
        return DynamicFactors(torch.stack(samples, 1), post)

    def posterior(self, x: torch.Tensor, noise_s: torch.Tensor | None = None,
                  noise_z: torch.Tensor | None = None):
        """Factorized posterior: one static Gaussian plus T dynamic Gaussians.

        With noise omitted the samples are the posterior means (evaluation
        mode); supplying noise makes the rollout reproducible.
        """
        hidden = self._hidden(x)
        pooled = hidden.mean(1)
        s_mean, s_log_var = self.static_head(pooled).chunk(2, dim=-1)
        s_post = GaussianParams(s_mean, s_log_var)
        if noise_s is None:
            noise_s = torch.zeros_like(s_mean)
        if noise_z is None:
            noise_z = x.new_zeros(x.shape[0], x.shape[1], self.config.d_z)
        s = reparameterize(s_post, noise_s)
        dynamics = self._dynamic_rollout(hidden, noise_z)
        return StaticFactor(s, s_post), dynamics

    def prior_params(self, z: torch.Tensor) -> GaussianParams:
        """p(z_t | z_{<t}) evaluated along a given trajectory, z_0 = 0."""
        N, T, d_z = z.shape
        inputs = torch.cat([z.new_zeros(N, 1, d_z), z[:, :-1]], dim=1)
        hx = z.new_zeros(N, self.config.hidden)
        cx = torch.zeros_like(hx)
        means, log_vars = [], []
        for t in range(T):
            hx, cx = self.prior_cell(inputs[:, t], (hx, cx))
            mean, log_var = self.prior_head(hx).chunk(2, dim=-1)
            means.append(mean)
            log_vars.append(log_var)
        return GaussianParams(torch.stack(means, 1), torch.stack(log_vars, 1))

    def prior_dynamic(self, z_prefix: torch.Tensor) -> GaussianParams:
        """Prior parameters for the step after a (possibly empty) prefix."""
        if z_prefix.ndim == 2:
            z_prefix = z_prefix.unsqueeze(0)
        N = z_prefix.shape[0] if z_prefix.numel() else 1
        d_z = self.config.d_z
        steps = torch.cat([z_prefix.new_zeros(N, 1, d_z), z_prefix], dim=1)
        hx = steps.new_zeros(N, self.config.hidden)
        cx = torch.zeros_like(hx)
        for t in range(steps.shape[1]):
            hx, cx = self.prior_cell(steps[:, t], (hx, cx))
        mean, log_var = self.prior_head(hx).chunk(2, dim=-1)
        return GaussianParams(mean, log_var)

    def decode(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Frame-wise decoding: frame t depends on (s, z_t) only."""
        T = z.shape[1]
        joint = torch.cat([s.unsqueeze(1).expand(-1, T, -1), z], dim=-1)
        return self.dec_out(torch.tanh(self.dec_hidden(joint)))


@dataclass
class DseNoise:
    """All randomness one loss evaluation consumes, so calls can be replayed."""

    noise_s: torch.Tensor
    noise_z: torch.Tensor
    noise_z_aug: torch.Tensor
    perm: torch.Tensor

    @classmethod
    def draw(cls, N: int, T: int, d_s: int, d_z: int,
             generator: torch.Generator | None, device=None, dtype=None) -> "DseNoise":
        def randn(*shape):
            return torch.randn(*shape, generator=generator, device=device, dtype=dtype)

        return cls(
            noise_s=randn(N, d_s),
            noise_z=randn(N, T, d_z),
            noise_z_aug=randn(N, T, d_z),
            perm=torch.randperm(T, generator=generator, device=device),
        )

    @classmethod
    def zeros(cls, N, T, d_s, d_z, device=None, dtype=None) -> "DseNoise":
        z = lambda *shape: torch.zeros(*shape, device=device, dtype=dtype)
        return cls(z(N, d_s), z(N, T, d_z), z(N, T, d_z), torch.arange(T, device=device))


def dse_loss(vae: SequenceVAE, x: torch.Tensor, config: Config,
             noise: DseNoise | None = None,
             generator: torch.Generator | None = None):
    """Full sequence-VAE objective on a batch of clips (N, T, d).

    Returns the loss breakdown (total included) and the latents used, so the
    counterfactual stage can reuse them without a second pass.
    """
    for name in ("gamma", "alpha", "beta", "theta"):
        if getattr(config, name) < 0:
            raise ValueError(f"negative loss weight {name}")
    N, T, _ = x.shape
    if noise is None:
        noise = DseNoise.draw(N, T, config.d_s, config.d_z, generator,
                              device=x.device, dtype=x.dtype)

    static, dynamics = vae.posterior(x, noise.noise_s, noise.noise_z)
    recon_x = vae.decode(static.sample, dynamics.samples)
    # the target side is treated as data: a trainable upstream encoder must not
    # be rewarded for simplifying its own features to make them reconstructable
    recon = 0.5 * ((recon_x - x.detach()) ** 2).sum((1, 2)).mean()

    kl_s = kl_diag_gaussian(static.posterior, static.posterior.standard_like()).mean()
    prior = vae.prior_params(dynamics.samples)
    kl_z = kl_diag_gaussian(dynamics.posteriors, prior).sum(-1).mean()

    # augmented views: shuffling keeps content for s, blurring keeps motion for z;
    # the contrastive terms compare posterior means, which keeps them informative
    # while the posterior variances are still wide early in training
    s_aug_post = vae.static_posterior(augment_content(x, noise.perm))
    hidden_aug = vae._hidden(augment_motion(x, config.blur_width))
    z_aug = vae._dynamic_rollout(hidden_aug, noise.noise_z_aug).posteriors.mean

    mi_z_x, mi_s_x, mi_z_s = mutual_information(
        dynamics.posteriors.mean, static.posterior.mean,
        z_aug, s_aug_post.mean, config.tau_nce, config.n_max)

    total = (recon + config.gamma * (kl_s + kl_z)
             - config.alpha * mi_z_x - config.beta * mi_s_x + config.theta * mi_z_s)
    breakdown = LossBreakdown(recon, kl_s, kl_z, mi_z_x, mi_s_x, mi_z_s,
                              cls=torch.zeros_like(total), total=total)
    latents = {"static": static, "dynamics": dynamics}
    return breakdown, latents

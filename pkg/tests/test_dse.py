import math

import numpy as np
import pytest
import torch

from dcl.config import Config
from dcl.dse import (
    DseNoise,
    GaussianParams,
    SequenceVAE,
    augment_content,
    augment_motion,
    contrastive_term,
    dse_loss,
    kl_diag_gaussian,
    mutual_information,
    reparameterize,
    _batch_contrastive,
)


@pytest.fixture(scope="module")
def cfg():
    return Config(
        T=8, d=16, d_raw=8, d_s=4, d_z=4, hidden=8, fusion_width=8,
        n_question_templates=6, batch=4, k=2, n_max=8,
        train_pairs=8, val_pairs=4, test_pairs=4,
        train_objects=8, val_objects=4, test_objects=4,
    ).validate()


@pytest.fixture(scope="module")
def vae(cfg):
    torch.manual_seed(0)
    return SequenceVAE(cfg).double()


def _x(cfg, n=3, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, cfg.T, cfg.d, generator=g, dtype=torch.float64)


# --- posterior -------------------------------------------------------------

def test_posterior_arity(vae, cfg):
    static, dynamics = vae.posterior(_x(cfg))
    assert static.posterior.mean.shape == (3, cfg.d_s)
    assert dynamics.posteriors.mean.shape == (3, cfg.T, cfg.d_z)  # one Gaussian per step
    assert dynamics.samples.shape == (3, cfg.T, cfg.d_z)
    assert torch.all(dynamics.z0 == 0)


def test_posterior_eight_steps(vae, cfg):
    _, dynamics = vae.posterior(_x(cfg))
    assert dynamics.posteriors.mean.shape[1] == 8


def test_posterior_duplicate_rows_identical(vae, cfg):
    x = _x(cfg, n=1)
    xx = torch.cat([x, x])
    g = torch.Generator().manual_seed(5)
    noise_s = torch.randn(1, cfg.d_s, generator=g, dtype=torch.float64).repeat(2, 1)
    noise_z = torch.randn(1, cfg.T, cfg.d_z, generator=g, dtype=torch.float64).repeat(2, 1, 1)
    static, dynamics = vae.posterior(xx, noise_s, noise_z)
    assert torch.allclose(static.posterior.mean[0], static.posterior.mean[1])
    assert torch.allclose(dynamics.posteriors.mean[0], dynamics.posteriors.mean[1])
    assert torch.allclose(dynamics.samples[0], dynamics.samples[1])


# --- reparameterization ----------------------------------------------------

def test_reparameterize_zero_noise_returns_mean():
    p = GaussianParams(torch.tensor([1.5, -2.0]), torch.tensor([0.3, -0.1]))
    assert torch.equal(reparameterize(p, torch.zeros(2)), p.mean)


def test_reparameterize_unit_case():
    p = GaussianParams(torch.zeros(3), torch.zeros(3))
    e1 = torch.tensor([1.0, 0.0, 0.0])
    assert torch.equal(reparameterize(p, e1), e1)


def test_reparameterize_shape_mismatch():
    p = GaussianParams(torch.zeros(3), torch.zeros(3))
    with pytest.raises(ValueError):
        reparameterize(p, torch.zeros(4))


def test_reparameterize_monte_carlo_mean():
    # oracle: empirical mean of 1e5 draws approximates the mean within 3 sigma/sqrt(n)
    mean = torch.tensor([0.7, -1.2])
    log_var = torch.tensor([0.4, -0.6])
    p = GaussianParams(mean, log_var)
    g = torch.Generator().manual_seed(0)
    draws = reparameterize(p, torch.randn(100_000, 2, generator=g))
    bound = 3 * p.std / math.sqrt(100_000)
    assert torch.all((draws.mean(0) - mean).abs() < bound)


# --- priors ----------------------------------------------------------------

def test_prior_dynamic_empty_prefix(vae, cfg):
    p = vae.prior_dynamic(torch.zeros(1, 0, cfg.d_z, dtype=torch.float64))
    assert p.mean.shape == (1, cfg.d_z)
    q = vae.prior_dynamic(torch.zeros(1, 0, cfg.d_z, dtype=torch.float64))
    assert torch.equal(p.mean, q.mean) and torch.equal(p.log_var, q.log_var)


def test_prior_masking(vae, cfg):
    # oracle: perturb steps >= L, prior params for steps <= L must not move
    g = torch.Generator().manual_seed(2)
    z = torch.randn(2, cfg.T, cfg.d_z, generator=g, dtype=torch.float64)
    base = vae.prior_params(z)
    z_perturbed = z.clone()
    z_perturbed[:, 3:] += 10.0
    moved = vae.prior_params(z_perturbed)
    assert torch.equal(base.mean[:, :4], moved.mean[:, :4])  # steps 1..4 depend on z_{<4} only
    assert not torch.allclose(base.mean[:, 4:], moved.mean[:, 4:])


def test_prior_prefix_matches_rollout(vae, cfg):
    g = torch.Generator().manual_seed(3)
    z = torch.randn(1, cfg.T, cfg.d_z, generator=g, dtype=torch.float64)
    rolled = vae.prior_params(z)
    step = vae.prior_dynamic(z[:, :3])
    assert torch.allclose(step.mean, rolled.mean[:, 3])
    assert torch.allclose(step.log_var, rolled.log_var[:, 3])


# --- decoder ---------------------------------------------------------------

def test_decode_framewise_permutation(vae, cfg):
    g = torch.Generator().manual_seed(4)
    s = torch.randn(2, cfg.d_s, generator=g, dtype=torch.float64)
    z = torch.randn(2, cfg.T, cfg.d_z, generator=g, dtype=torch.float64)
    perm = torch.randperm(cfg.T, generator=g)
    assert torch.equal(vae.decode(s, z)[:, perm], vae.decode(s, z[:, perm]))


def test_decode_jacobian_sparsity(vae, cfg):
    g = torch.Generator().manual_seed(5)
    s = torch.randn(1, cfg.d_s, generator=g, dtype=torch.float64)
    z = torch.randn(1, cfg.T, cfg.d_z, generator=g, dtype=torch.float64)
    base = vae.decode(s, z)
    z2 = z.clone()
    z2[:, 3] += 0.37
    moved = vae.decode(s, z2)
    delta = (moved - base).abs().sum(-1).squeeze(0)
    assert delta[3] > 0
    others = torch.cat([delta[:3], delta[4:]])
    assert torch.all(others == 0)  # off-step outputs unchanged exactly


def test_decode_default_shape():
    torch.manual_seed(0)
    big = SequenceVAE(Config())
    out = big.decode(torch.randn(2, 64), torch.randn(2, 8, 64))
    assert out.shape == (2, 8, 256)


# --- KL --------------------------------------------------------------------

def test_kl_identity_zero():
    p = GaussianParams(torch.zeros(5), torch.zeros(5))
    assert float(kl_diag_gaussian(p, p)) == 0.0


def test_kl_closed_form_vs_quadrature():
    # oracle: 1-D numerical integration of q log(q/p)
    from scipy.integrate import quad
    from scipy.stats import norm

    cases = [(0.9, 0.0, 0.0, 0.0), (0.0, 0.7, 0.0, 0.0), (1.3, -0.4, -0.8, 0.5)]
    for mq, lvq, mp_, lvp in cases:
        sq, sp = math.exp(0.5 * lvq), math.exp(0.5 * lvp)
        integrand = lambda x: norm.pdf(x, mq, sq) * (
            norm.logpdf(x, mq, sq) - norm.logpdf(x, mp_, sp))
        want, _ = quad(integrand, mq - 12 * sq, mq + 12 * sq)
        got = float(kl_diag_gaussian(
            GaussianParams(torch.tensor([mq]), torch.tensor([lvq])),
            GaussianParams(torch.tensor([mp_]), torch.tensor([lvp]))))
        assert got == pytest.approx(want, rel=1e-6)


def test_kl_mean_shift_formula():
    mu = torch.tensor([0.3, -1.1, 2.0])
    q = GaussianParams(mu, torch.zeros(3))
    p = GaussianParams(torch.zeros(3), torch.zeros(3))
    assert float(kl_diag_gaussian(q, p)) == pytest.approx(float((mu ** 2).sum() / 2))


def test_kl_nonnegative_random(rng):
    for _ in range(200):
        q = GaussianParams(torch.tensor(rng.normal(size=4)), torch.tensor(rng.normal(size=4)))
        p = GaussianParams(torch.tensor(rng.normal(size=4)), torch.tensor(rng.normal(size=4)))
        assert float(kl_diag_gaussian(q, p)) >= 0.0


def test_kl_dimension_mismatch():
    with pytest.raises(ValueError):
        kl_diag_gaussian(GaussianParams(torch.zeros(3), torch.zeros(3)),
                         GaussianParams(torch.zeros(4), torch.zeros(4)))


# --- augmentations ----------------------------------------------------------

def test_augment_content_identity():
    x = torch.randn(2, 6, 5)
    assert torch.equal(augment_content(x, torch.arange(6)), x)


def test_augment_content_preserves_multiset():
    x = torch.randn(1, 6, 5)
    shuffled = augment_content(x, perm_seed=123)
    a = sorted(map(tuple, x[0].tolist()))
    b = sorted(map(tuple, shuffled[0].tolist()))
    assert a == b


def test_augment_motion_delta_limit():
    x = torch.randn(2, 4, 16, dtype=torch.float64)
    out = augment_motion(x, blur_width=1e-4)
    assert (out - x).abs().max() < 1e-6
    assert out.shape == x.shape


def test_augment_motion_preserves_time_order():
    x = torch.randn(1, 5, 16)
    out = augment_motion(x, blur_width=1.0)
    assert out.shape == x.shape
    # smoothing acts per frame: frame t of the output depends only on frame t
    x2 = x.clone()
    x2[:, 2] += 1.0
    out2 = augment_motion(x2, blur_width=1.0)
    assert torch.equal(out2[:, :2], out[:, :2]) and torch.equal(out2[:, 3:], out[:, 3:])


# --- contrastive / MI -------------------------------------------------------

def test_contrastive_symmetric_value():
    v = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    value = contrastive_term(v, v, v.expand(4, 3), tau=0.5)
    assert float(value) == pytest.approx(math.log(1 / 5), abs=1e-12)


def test_contrastive_monotone_in_positive_similarity():
    torch.manual_seed(0)
    anchor = torch.tensor([1.0, 0.0])
    negatives = torch.randn(5, 2, dtype=torch.float64)
    values = []
    for angle in (1.5, 1.0, 0.5, 0.0):
        positive = torch.tensor([math.cos(angle), math.sin(angle)], dtype=torch.float64)
        values.append(float(contrastive_term(anchor.double(), positive, negatives, 0.5)))
    assert values == sorted(values)
    assert all(v < 0 for v in values)


def test_contrastive_zero_norm_rejected():
    v = torch.tensor([1.0, 0.0])
    with pytest.raises(ValueError, match="zero-norm"):
        contrastive_term(v, torch.zeros(2), v.expand(2, 2), 0.5)


def test_default_temperature_is_half():
    assert Config().tau_nce == 0.5


def test_mi_same_object_batch():
    # every clip is the same object: all similarities tie, each term is ln(1/(n+1))
    n_batch = 5
    z = torch.randn(1, 4, 3, dtype=torch.float64).expand(n_batch, 4, 3)
    s = torch.randn(1, 3, dtype=torch.float64).expand(n_batch, 3)
    mi_z_x, mi_s_x, mi_z_s = mutual_information(z, s, z, s, tau=0.5, n_max=32)
    want = math.log(1 / n_batch)  # n = n_batch - 1 negatives
    for value in (mi_z_x, mi_s_x, mi_z_s):
        assert float(value) == pytest.approx(want, abs=1e-12)


def test_mi_equals_single_term_when_views_identical():
    g = torch.Generator().manual_seed(1)
    z = torch.randn(6, 4, 3, generator=g, dtype=torch.float64)
    s = torch.randn(6, 3, generator=g, dtype=torch.float64)
    mi_z_x, mi_s_x, _ = mutual_information(z, s, z, s, tau=0.5, n_max=32)
    c_z = _batch_contrastive(z.flatten(1), z.flatten(1), z.flatten(1), 0.5, 32, "z")
    c_s = _batch_contrastive(s, s, s, 0.5, 32, "s")
    assert float(mi_z_x) == pytest.approx(float(c_z), abs=1e-12)
    assert float(mi_s_x) == pytest.approx(float(c_s), abs=1e-12)


def test_mi_nonpositive_and_small_batch_rejected():
    g = torch.Generator().manual_seed(2)
    z = torch.randn(4, 3, 2, generator=g)
    s = torch.randn(4, 2, generator=g)
    values = mutual_information(z, s, z + 0.1, s + 0.1, tau=0.5, n_max=8)
    assert all(float(v) <= 0 for v in values)
    with pytest.raises(ValueError, match="at least 2"):
        mutual_information(z[:1], s[:1], z[:1], s[:1], tau=0.5, n_max=8)


# --- full loss ---------------------------------------------------------------

def test_dse_loss_weights_zero_leaves_recon(vae, cfg):
    import dataclasses

    x = _x(cfg, n=4)
    zeroed = dataclasses.replace(cfg, gamma=0.0, alpha=0.0, beta=0.0, theta=0.0)
    breakdown, _ = dse_loss(vae, x, zeroed, generator=torch.Generator().manual_seed(0))
    assert torch.equal(breakdown.total, breakdown.recon)


def test_dse_loss_negative_weight_rejected(vae, cfg):
    import dataclasses

    bad = dataclasses.replace(cfg, alpha=-0.1)
    with pytest.raises(ValueError, match="negative"):
        dse_loss(vae, _x(cfg), bad)


def test_dse_loss_gradients_match_finite_differences(cfg):
    # oracle: central differences over a seeded subsample of parameters
    torch.manual_seed(0)
    vae = SequenceVAE(cfg).double()
    x = _x(cfg, n=4, seed=9)
    noise = DseNoise.draw(4, cfg.T, cfg.d_s, cfg.d_z,
                          torch.Generator().manual_seed(11), dtype=torch.float64)

    def loss():
        return dse_loss(vae, x, cfg, noise=noise)[0].total

    vae.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in vae.named_parameters():
        flat, gflat = p.data.view(-1), p.grad.view(-1)
        for i in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
            orig = flat[i].item()
            h = 1e-5 * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + h
                up = float(loss())
                flat[i] = orig - h
                down = float(loss())
                flat[i] = orig
            fd = (up - down) / (2 * h)
            an = float(gflat[i])
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-3))
    assert worst < 1e-4

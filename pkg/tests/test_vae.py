import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from conftest import randomize, tiny_model_config
from vaeflow import autodiff as ad
from vaeflow.autodiff import finite_diff_check
from vaeflow.config import SecondStageConfig, TrainConfig
from vaeflow.data import synth_dataset
from vaeflow.distributions import DiagGaussian
from vaeflow.flows import build_prior_flow
from vaeflow.hybrid import HybridModel, Phase
from vaeflow.nn import param_hash
from vaeflow.rng import RngStream
from vaeflow.vae import Decoder, Encoder, SecondStageVAE, elbo, lr_at, train_second_stage_vae, train_vae_phase1

SHAPE = (1, 4, 4)


def blobs(n=40, size=8, seed=7):
    return synth_dataset("blobs", n, (size, size), RngStream(seed), test_fraction=0.0).train


def tiny_model(seed=0, **kw):
    return HybridModel((1, 8, 8), tiny_model_config(fold="auto", **kw), RngStream(seed))


def test_encoder_rows_are_independent(f64):
    rng = RngStream(0)
    enc = Encoder(SHAPE, 3, 4, 1, rng)
    randomize(enc.named_parameters(), rng)
    x = rng.uniform((5, *SHAPE))
    full = enc(x)
    alone = enc(x[2:3])
    np.testing.assert_allclose(full.mean.value[2:3], alone.mean.value, atol=1e-12)
    np.testing.assert_allclose(full.log_var.value[2:3], alone.log_var.value, atol=1e-12)
    perm = np.array([4, 0, 3, 1, 2])
    np.testing.assert_allclose(enc(x[perm]).mean.value, full.mean.value[perm], atol=1e-12)


def test_encoder_rejects_wrong_shape(f64):
    enc = Encoder(SHAPE, 3, 4, 1, RngStream(0))
    with pytest.raises(ValueError, match="shape"):
        enc(np.zeros((2, 1, 5, 4)))


def test_zero_heads_give_standard_posterior(f64):
    rng = RngStream(1)
    enc = Encoder(SHAPE, 3, 4, 1, rng)
    enc.head_mean.weight.value[...] = 0.0
    q = enc(rng.uniform((4, *SHAPE)))
    np.testing.assert_array_equal(q.mean.value, 0.0)
    np.testing.assert_array_equal(q.log_var.value, 0.0)
    np.testing.assert_array_equal(q.kl_standard().value, 0.0)


def test_encoder_gradients_match_finite_differences(f64):
    rng = RngStream(2)
    enc = Encoder(SHAPE, 2, 2, 1, rng)
    randomize(enc.named_parameters(), rng)
    x = rng.uniform((3, *SHAPE))
    params = enc.parameters()

    def loss():
        q = enc(x)
        return ad.sum(q.kl_standard())

    assert finite_diff_check(loss, params) < 1e-6


def test_decoder_zero_mean_unit_variance_reconstruction(f64):
    dec = Decoder(SHAPE, 2, 4, 1, RngStream(3), log_var_init=0.0)
    dec.head_mean.weight.value[...] = 0.0
    p = dec(np.ones((2, 2)))
    d = int(np.prod(SHAPE))
    np.testing.assert_allclose(p.log_prob(np.zeros((2, *SHAPE))).value, -(d / 2) * math.log(2 * math.pi),
                               rtol=1e-14)


def test_gamma_decoder_shares_one_variance(f64):
    dec = Decoder(SHAPE, 2, 4, 1, RngStream(3), variance="gamma", log_var_init=-2.0)
    p = dec(RngStream(4).normal((3, 2)))
    np.testing.assert_array_equal(p.log_var.value, -2.0)
    with pytest.raises(ValueError, match="variance"):
        Decoder(SHAPE, 2, 4, 1, RngStream(3), variance="full")


def test_kl_is_exactly_zero_when_posterior_equals_prior(f64):
    model = tiny_model()
    model.encoder.head_mean.weight.value[...] = 0.0
    terms = elbo(model, blobs(6), RngStream(5), n_mc=3)
    np.testing.assert_allclose(terms.kl.value, 0.0, atol=1e-12)


def test_n_mc_average_matches_repeated_single_draws(f64):
    model = tiny_model()
    randomize(model.vae_parameters(), RngStream(6), scale=0.2)
    x = blobs(5)
    many = elbo(model, x, RngStream(7), n_mc=4).elbo.value
    rng = RngStream(7)
    singles = np.mean([elbo(model, x, rng, n_mc=1).elbo.value for _ in range(4)], axis=0)
    np.testing.assert_allclose(many, singles, rtol=1e-12)


def test_n_mc_must_be_positive(f64):
    with pytest.raises(ValueError):
        elbo(tiny_model(), blobs(2), RngStream(0), n_mc=0)


# --- linear-Gaussian model: exact marginal likelihood as oracle -------------

class _Linear:
    def __init__(self, w, b, sigma):
        self.w, self.b, self.sigma = w, b, sigma

    def __call__(self, z):
        z = ad.as_var(z)
        mean = ad.matmul(z, self.w.T) + self.b
        return DiagGaussian(mean, np.full(mean.shape, 2 * math.log(self.sigma)))


class _Posterior:
    """Exact q(z|x) for orthogonal-column W, optionally perturbed."""

    def __init__(self, w, b, sigma, shift=0.0, log_var_shift=0.0):
        col = np.sum(w * w, axis=0)
        self.prec = 1.0 + col / sigma**2
        self.w, self.b, self.sigma = w, b, sigma
        self.shift, self.lvs = shift, log_var_shift

    def __call__(self, x):
        x = ad.as_var(x).value
        mean = (x - self.b) @ self.w / self.sigma**2 / self.prec + self.shift
        lv = np.tile(-np.log(self.prec) + self.lvs, (len(x), 1))
        return DiagGaussian(mean, lv)


def _linear_setup():
    rng = RngStream(8)
    d, k, sigma = 2, 1, 0.4
    w = np.linalg.qr(rng.normal((d, k)))[0] * 1.5
    b = rng.normal((d,)) * 0.1
    x = rng.normal((20, k)) @ w.T + b + sigma * rng.normal((20, d))
    cov = w @ w.T + sigma**2 * np.eye(d)
    log_px = multivariate_normal(mean=b, cov=cov).logpdf(x)
    return w, b, sigma, x, k, log_px


def test_exact_posterior_elbo_equals_log_marginal(f64):
    w, b, sigma, x, k, log_px = _linear_setup()
    model = SimpleNamespace(encoder=_Posterior(w, b, sigma), decoder=_Linear(w, b, sigma),
                            prior=build_prior_flow(k, 2, 4, RngStream(9)))
    terms = elbo(model, x, RngStream(10), n_mc=2)
    np.testing.assert_allclose(terms.elbo.value, log_px, atol=1e-8)


def test_approximate_posterior_elbo_is_a_close_lower_bound(f64):
    w, b, sigma, x, k, log_px = _linear_setup()
    model = SimpleNamespace(encoder=_Posterior(w, b, sigma, shift=0.05, log_var_shift=0.3),
                            decoder=_Linear(w, b, sigma), prior=build_prior_flow(k, 2, 4, RngStream(9)))
    est = elbo(model, x, RngStream(11), n_mc=2000).elbo.value
    gap = log_px - est
    assert np.all(gap > 0)
    assert np.all(gap < 0.5)


# --- training ----------------------------------------------------------------

def test_lr_schedule_halves():
    cfg = TrainConfig(lr=1e-3, lr_halve_every=100)
    assert lr_at(cfg, 0) == 1e-3 and lr_at(cfg, 99) == 1e-3
    assert lr_at(cfg, 100) == 5e-4 and lr_at(cfg, 250) == 2.5e-4
    assert lr_at(TrainConfig(lr=1e-3, lr_halve_every=0), 500) == 1e-3


def test_zero_learning_rate_leaves_parameters_unchanged(f32):
    model = tiny_model()
    before = param_hash(model.vae_parameters())
    train_vae_phase1(model, blobs(20), TrainConfig(vae_epochs=2, batch_size=10, lr=0.0), RngStream(1))
    assert param_hash(model.vae_parameters()) == before
    assert model.phase == Phase.GLOW and model.state.vae_epochs == 2


def test_phase1_refuses_a_finished_model(f32):
    model = tiny_model()
    model.phase = Phase.GLOW
    with pytest.raises(ValueError, match="past phase 1"):
        train_vae_phase1(model, blobs(4), TrainConfig(vae_epochs=1), RngStream(0))


def test_phase1_improves_elbo_by_100_nats(f32, tmp_path):
    cfg = tiny_model_config(fold="auto", d_z=8, enc_width=8, dec_width=8, decoder_log_var_init=-4.0)
    model = HybridModel((1, 8, 8), cfg, RngStream(3))
    log = tmp_path / "m.csv"
    hist = train_vae_phase1(model, blobs(200), TrainConfig(vae_epochs=20, batch_size=25, lr=3e-3),
                            RngStream(4), log_path=str(log))
    assert hist[-1]["elbo"] - hist[0]["elbo"] >= 100
    lines = log.read_text().splitlines()
    assert lines[0] == "epoch,elbo,recon,kl,wall_seconds" and len(lines) == 21


def test_phase1_shrinks_a_loose_decoder_variance(f32):
    cfg = tiny_model_config(fold="auto", d_z=4, enc_width=8, dec_width=8, decoder_log_var_init=-1.0)
    model = HybridModel((1, 8, 8), cfg, RngStream(3))
    train_vae_phase1(model, blobs(200), TrainConfig(vae_epochs=10, batch_size=25, lr=3e-3), RngStream(4))
    assert float(model.decoder.head_log_var.bias.value.mean()) < -1.0


# --- second-stage VAE --------------------------------------------------------

def test_second_stage_gradients_match_finite_differences(f64):
    rng = RngStream(12)
    vae = SecondStageVAE(3, 5, rng)
    randomize(vae.named_parameters(), rng)
    z = rng.normal((4, 3))
    assert finite_diff_check(lambda: ad.sum(vae.elbo(z, RngStream(13))), vae.parameters()) < 1e-6


def test_second_stage_learns_standard_normal(f32):
    rng = RngStream(14)
    latents = rng.normal((1000, 2))
    vae = train_second_stage_vae(latents, SecondStageConfig(epochs=40, hidden=16, batch_size=50, lr=3e-3), rng)
    s = vae.sample_z(5000, RngStream(15))
    np.testing.assert_allclose(s.mean(axis=0), 0.0, atol=0.1)
    np.testing.assert_allclose(s.std(axis=0), 1.0, atol=0.15)


def test_second_stage_captures_two_modes(f32):
    rng = RngStream(16)
    centers = np.where(rng.uniform((1000,)) < 0.5, -2.0, 2.0)
    latents = np.stack([centers + 0.2 * rng.normal((1000,)), 0.5 * rng.normal((1000,))], axis=1)
    vae = train_second_stage_vae(latents, SecondStageConfig(epochs=100, hidden=32, batch_size=50, lr=3e-3), rng)
    s = vae.sample_z(4000, RngStream(17))[:, 0]
    left, right, middle = np.mean(s < -1), np.mean(s > 1), np.mean(np.abs(s) < 0.5)
    assert left > 0.3 and right > 0.3
    assert middle < 0.15

"""VAE + conditional pixel flow.

The decoder's diagonal Gaussian N(g_mu(z), g_Sigma(z)) is the base density
of an invertible pixel-space flow f, so

    log p(x | z) = log N(f(x); g_mu(z), g_Sigma(z)) + log|det df/dx|.

Training is two-phase: phase 1 fits encoder, decoder and latent prior flow;
phase 2 freezes all of them and fits only f. Sampling draws the base sample
at a reduced temperature and maps it back through f^{-1}.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .config import ModelConfig, TrainConfig
from .distributions import DiagGaussian
from .flows import FlowStack, build_pixel_flow, build_prior_flow, prior_logprob
from .nn import AdamState, param_hash
from .rng import RngStream
from .vae import Decoder, Encoder, run_epochs


class Phase(enum.IntEnum):
    VAE = 0       # phase 1 not finished
    GLOW = 1      # phase 1 complete; pixel flow not finished
    COMPLETE = 2


@dataclass
class TrainState:
    vae_epochs: int = 0
    glow_epochs: int = 0
    vae_opt: AdamState | None = None
    glow_opt: AdamState | None = None
    rng_state: np.ndarray | None = None
    run_config_text: str = ""


class HybridModel:
    def __init__(self, shape: tuple[int, int, int], cfg: ModelConfig, rng: RngStream):
        c, h, w = shape
        self.shape = tuple(int(s) for s in shape)
        self.cfg = cfg
        self.encoder = Encoder(self.shape, cfg.d_z, cfg.enc_width, cfg.res_depth, rng)
        self.decoder = Decoder(self.shape, cfg.d_z, cfg.dec_width, cfg.res_depth, rng,
                               variance=cfg.decoder_variance, log_var_init=cfg.decoder_log_var_init)
        self.prior = build_prior_flow(cfg.d_z, cfg.prior_depth, cfg.prior_hidden, rng)
        self.folded = cfg.fold == "on" or (cfg.fold == "auto" and c == 1)
        self.pixel_flow = build_pixel_flow(c, cfg.glow_depth, cfg.glow_hidden, rng, fold=self.folded)
        if not cfg.actnorm_data_init:
            # identity start: phase 2 begins exactly at the plain VAE likelihood
            self.pixel_flow.mark_initialized()
        self.phase = Phase.VAE
        self.state = TrainState()

    @property
    def dims(self) -> int:
        return int(np.prod(self.shape))

    def vae_parameters(self) -> dict[str, Var]:
        out = {}
        for prefix, mod in (("encoder", self.encoder), ("decoder", self.decoder), ("prior", self.prior)):
            out.update(mod.named_parameters(prefix + "."))
        return out

    def flow_parameters(self) -> dict[str, Var]:
        return self.pixel_flow.named_parameters("pixel_flow.")

    def named_parameters(self) -> dict[str, Var]:
        return {**self.vae_parameters(), **self.flow_parameters()}

    def vae_hash(self) -> str:
        return param_hash(self.vae_parameters())

    # --- densities ------------------------------------------------------

    def base(self, z) -> DiagGaussian:
        return self.decoder(z)

    def log_likelihood_bound(self, x, n_mc: int, rng: RngStream, use_flow: bool = True) -> np.ndarray:
        """Per-sample lower bound E_q[log p(x|z)] - E_q[log q(z|x) - log p(z)], in nats.

        With ``use_flow=False`` the plain Gaussian decoder is used (the VAE ELBO).
        """
        with ad.no_grad():
            x = ad.as_var(x)
            q = self.encoder(x)
            total = np.zeros(x.shape[0], dtype=np.float64)
            for _ in range(n_mc):
                z = q.sample(1.0, rng)
                if use_flow:
                    rec = conditional_loglik(self, x, z)
                else:
                    rec = self.decoder(z).log_prob(x)
                kl = q.log_prob(z) - prior_logprob(self.prior, z)
                total += (rec.value - kl.value).astype(np.float64)
            return total / n_mc


def conditional_loglik(model: HybridModel, x, z) -> Var:
    """log p_x̂(x | z) = log N(f(x); g_mu(z), g_Sigma(z)) + log|det df/dx|, per sample."""
    if model.phase == Phase.VAE:
        raise RuntimeError("conditional_loglik: pixel flow is not available before phase 1 completes")
    if not model.pixel_flow.initialized:
        raise RuntimeError("conditional_loglik: pixel flow ActNorm not initialized")
    y, logdet = model.pixel_flow.forward(x)
    return model.base(z).log_prob(y) + logdet


def train_glow_phase2(model: HybridModel, images: np.ndarray, cfg: TrainConfig, rng: RngStream,
                      log_path: str | None = None,
                      on_epoch_end: Callable[[int], None] | None = None) -> list[dict]:
    """Fit only the pixel flow: maximize E_q(z|x)[conditional_loglik(x, z)].

    Encoder, decoder and prior run outside the tape, so their parameters
    cannot change. The recorded ``kl`` column is the frozen MC KL term.
    """
    if model.phase == Phase.VAE:
        raise RuntimeError("train_glow_phase2: phase 1 has not completed")
    params = model.flow_parameters()
    if model.state.glow_opt is None:
        model.state.glow_opt = AdamState(lr=cfg.lr)
    opt = model.state.glow_opt

    if not model.pixel_flow.initialized:
        from .data import dequantize
        init_rng = RngStream(rng.seed ^ 0x5EED)
        first = dequantize(images[: cfg.batch_size], init_rng)
        model.pixel_flow.initialize(first)

    def step(xb, r):
        with ad.no_grad():
            q = model.encoder(xb)
            z = q.sample(1.0, r)
            base = model.decoder(z)
            kl = (q.log_prob(z) - prior_logprob(model.prior, z)).value
        y, logdet = model.pixel_flow.forward(xb)
        ll = base.log_prob(y) + logdet
        loss = -ad.mean(ll)
        rec = float(np.mean(ll.value))
        return loss, {"elbo": rec - float(np.mean(kl)), "recon": rec, "kl": float(np.mean(kl))}

    def epoch_done(epoch):
        model.state.glow_epochs = epoch
        if epoch == cfg.glow_epochs:
            model.phase = Phase.COMPLETE
        if on_epoch_end is not None:
            on_epoch_end(epoch)

    start = model.state.glow_epochs
    history = run_epochs(params, opt, step, images, cfg, rng, start, cfg.glow_epochs, log_path, epoch_done)
    if start >= cfg.glow_epochs:
        model.phase = Phase.COMPLETE
    return history


# --- sampling ----------------------------------------------------------------

def sample_latents(model: HybridModel, n: int, rng: RngStream) -> np.ndarray:
    """z = h^{-1}(u), u ~ N(0, I)."""
    with ad.no_grad():
        u = rng.normal((n, model.cfg.d_z))
        return model.prior.inverse(u).value


def decode_latents(model: HybridModel, z, temperature: float, rng: RngStream | None = None,
                   return_base: bool = False):
    """x̄ ~ N(g_mu(z), T^2 g_Sigma(z)), then x̂ = f^{-1}(x̄). T = 0 skips the draw."""
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    with ad.no_grad():
        base = model.base(ad.as_var(np.asarray(z, dtype=ad.get_dtype())))
        if temperature == 0:
            xbar = base.mean
        else:
            if rng is None:
                raise ValueError("a random stream is required for temperature > 0")
            xbar = base.sample(temperature, rng)
        x = model.pixel_flow.inverse(xbar).value
    return (x, xbar.value) if return_base else x


def sample(model: HybridModel, n: int, temperature_glow: float, rng: RngStream) -> np.ndarray:
    """Ancestral sample u -> z -> x̄ (tempered) -> f^{-1}(x̄); values are not clipped."""
    z = sample_latents(model, n, rng)
    eps = rng.normal((n, *model.shape))
    with ad.no_grad():
        base = model.base(z)
        xbar = base.sample(temperature_glow, rng, eps=eps) if temperature_glow > 0 else base.mean
        return model.pixel_flow.inverse(xbar).value


def sample_vae(model: HybridModel, n: int, temperature: float, rng: RngStream) -> np.ndarray:
    """Ancestral samples of the underlying VAE only (x̄, no pixel flow)."""
    z = sample_latents(model, n, rng)
    eps = rng.normal((n, *model.shape))
    with ad.no_grad():
        base = model.base(z)
        return (base.sample(temperature, rng, eps=eps) if temperature > 0 else base.mean).value


def interpolate(model: HybridModel, z_a, z_b, steps: int, temperature_glow: float = 0.0,
                rng: RngStream | None = None) -> np.ndarray:
    """Decode the straight line from z_a to z_b (inclusive) through g_mu and f^{-1}."""
    if steps < 2:
        raise ValueError("interpolate needs steps >= 2")
    z_a = np.asarray(z_a, dtype=ad.get_dtype()).reshape(1, -1)
    z_b = np.asarray(z_b, dtype=ad.get_dtype()).reshape(1, -1)
    lam = np.linspace(0.0, 1.0, steps, dtype=z_a.dtype)[:, None]
    zs = (1 - lam) * z_a + lam * z_b
    zs[0], zs[-1] = z_a[0], z_b[0]
    return decode_latents(model, zs, temperature_glow, rng)


def sharpen_pair(model: HybridModel, z, rng: RngStream, temperature: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """(g_mu(z), f^{-1}(x̄)) for side-by-side comparison of VAE and flow outputs."""
    with ad.no_grad():
        vae_image = model.decoder.mean(ad.as_var(np.asarray(z, dtype=ad.get_dtype()))).value
    glow_image = decode_latents(model, z, temperature, rng)
    return vae_image, glow_image


def bits_per_dim_from_nats(nll_nats: float, dims: int) -> float:
    return nll_nats / (dims * math.log(2)) + 8.0

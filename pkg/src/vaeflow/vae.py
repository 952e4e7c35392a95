"""Encoder/decoder networks, the ELBO with a flow prior, and phase-1 training.

Also holds the dense second-stage VAE used as the baseline latent model
against which the flow prior is compared.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .config import SecondStageConfig, TrainConfig
from .data import dequantize
from .distributions import DiagGaussian
from .flows import prior_logprob
from .nn import AdamState, Conv2d, Dense, Module, ResBlock, adam_step, param
from .rng import RngStream

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "elbo", "recon", "kl", "wall_seconds")


class TrainingDiverged(RuntimeError):
    pass


class Encoder(Module):
    """Residual conv trunk and dense heads for q(z|x)."""

    def __init__(self, shape: tuple[int, int, int], d_z: int, width: int, depth: int, rng: RngStream):
        c, h, w = shape
        self.shape = tuple(shape)
        self.d_z = d_z
        self.conv_in = Conv2d(c, width, 3, rng)
        self.blocks = [ResBlock(width, rng) for _ in range(depth)]
        self.head_mean = Dense(width * h * w, d_z, rng)
        self.head_log_var = Dense(width * h * w, d_z, rng, zero=True)

    def __call__(self, x) -> DiagGaussian:
        x = ad.as_var(x)
        if x.shape[1:] != self.shape:
            raise ValueError(f"encode: input shape {x.shape[1:]} does not match model shape {self.shape}")
        hid = self.conv_in(x)
        for block in self.blocks:
            hid = block(hid)
        flat = ad.reshape(ad.relu(hid), (x.shape[0], -1))
        return DiagGaussian(self.head_mean(flat), self.head_log_var(flat))


class Decoder(Module):
    """Maps z to a pixel-space diagonal Gaussian (mean g_mu, log-variance g_Sigma).

    ``variance="gamma"`` replaces the per-pixel head with one learned scalar.
    """

    def __init__(self, shape: tuple[int, int, int], d_z: int, width: int, depth: int, rng: RngStream,
                 variance: str = "diag", log_var_init: float = -4.0):
        c, h, w = shape
        self.shape = tuple(shape)
        self.width = width
        self.variance = variance
        self.fc = Dense(d_z, width * h * w, rng)
        self.blocks = [ResBlock(width, rng) for _ in range(depth)]
        self.head_mean = Conv2d(width, c, 3, rng)
        if variance == "diag":
            self.head_log_var = Conv2d(width, c, 3, rng, zero=True)
            self.head_log_var.bias.value[...] = log_var_init
        elif variance == "gamma":
            self.log_gamma = param(np.full((1, 1, 1, 1), log_var_init))
        else:
            raise ValueError(f"unknown decoder variance mode {variance!r}")

    def trunk(self, z) -> Var:
        z = ad.as_var(z)
        c, h, w = self.shape
        hid = ad.reshape(self.fc(z), (z.shape[0], self.width, h, w))
        for block in self.blocks:
            hid = block(hid)
        return ad.relu(hid)

    def __call__(self, z) -> DiagGaussian:
        hid = self.trunk(z)
        mean = self.head_mean(hid)
        if self.variance == "diag":
            log_var = self.head_log_var(hid)
        else:
            log_var = self.log_gamma + Var(np.zeros(mean.shape, dtype=mean.dtype))
        return DiagGaussian(mean, log_var)

    def mean(self, z) -> Var:
        return self.head_mean(self.trunk(z))


def encode(encoder: Encoder, x) -> DiagGaussian:
    return encoder(x)


@dataclass
class ElboTerms:
    recon: Var
    kl: Var
    elbo: Var


def elbo(model, x, rng: RngStream, n_mc: int = 1) -> ElboTerms:
    """Per-sample ELBO with a Monte Carlo KL against the flow prior.

    ``recon`` and ``kl`` share the same reparameterized posterior draws.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    x = ad.as_var(x)
    q = model.encoder(x)
    recon = kl = None
    for _ in range(n_mc):
        z = q.sample(1.0, rng)
        r = model.decoder(z).log_prob(x)
        k = q.log_prob(z) - prior_logprob(model.prior, z)
        recon = r if recon is None else recon + r
        kl = k if kl is None else kl + k
    if n_mc > 1:
        recon = recon * (1.0 / n_mc)
        kl = kl * (1.0 / n_mc)
    return ElboTerms(recon, kl, recon - kl)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_halve_every and cfg.lr_halve_every > 0:
        return cfg.lr * 0.5 ** (epoch // cfg.lr_halve_every)
    return cfg.lr


def append_metrics(path: str | None, row: dict) -> None:
    if not path:
        return
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRIC_FIELDS)
        writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])


def run_epochs(params: dict[str, Var], opt: AdamState,
               step_fn: Callable[[np.ndarray, RngStream], tuple[Var, dict[str, float]]],
               images: np.ndarray, cfg: TrainConfig, rng: RngStream,
               start: int, stop: int, log_path: str | None = None,
               on_epoch_end: Callable[[int], None] | None = None) -> list[dict]:
    """Shared minibatch loop: fresh dequantization and shuffle each epoch.

    ``step_fn`` runs inside an active tape and returns the scalar loss to
    minimize plus per-batch metrics.
    """
    history = []
    n = len(images)
    for epoch in range(start, stop):
        t0 = time.perf_counter()
        opt.lr = lr_at(cfg, epoch)
        x_all = dequantize(images, rng)
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            xb = x_all[order[lo:lo + cfg.batch_size]]
            with Tape() as tape:
                loss, metrics = step_fn(xb, rng)
            if not np.isfinite(loss.value).all():
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}")
            tape.backward(loss)
            adam_step(params, opt)
            for k, v in metrics.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        row = {"epoch": epoch + 1, **{k: v / batches for k, v in sums.items()},
               "wall_seconds": time.perf_counter() - t0}
        history.append(row)
        append_metrics(log_path, row)
        log.debug("epoch %d %s", epoch + 1, row)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1)
    return history


def train_vae_phase1(model, images: np.ndarray, cfg: TrainConfig, rng: RngStream,
                     log_path: str | None = None,
                     on_epoch_end: Callable[[int], None] | None = None) -> list[dict]:
    """Jointly fit encoder, decoder and prior flow by maximizing the mean ELBO.

    Resumes from ``model.state.vae_epochs`` and marks phase 1 complete at the end.
    """
    from .hybrid import Phase

    if model.phase != Phase.VAE:
        raise ValueError(f"train_vae_phase1: model is already past phase 1 ({model.phase.name})")
    params = model.vae_parameters()
    if model.state.vae_opt is None:
        model.state.vae_opt = AdamState(lr=cfg.lr)
    opt = model.state.vae_opt

    def step(xb, r):
        terms = elbo(model, xb, r, n_mc=1)
        loss = -ad.mean(terms.elbo)
        return loss, {"elbo": float(np.mean(terms.elbo.value)),
                      "recon": float(np.mean(terms.recon.value)),
                      "kl": float(np.mean(terms.kl.value))}

    def epoch_done(epoch):
        model.state.vae_epochs = epoch
        if epoch == cfg.vae_epochs:
            model.phase = Phase.GLOW
        if on_epoch_end is not None:
            on_epoch_end(epoch)

    start = model.state.vae_epochs
    history = run_epochs(params, opt, step, images, cfg, rng, start, cfg.vae_epochs,
                         log_path, epoch_done)
    if start >= cfg.vae_epochs:
        model.phase = Phase.GLOW
    return history


# --- second-stage VAE baseline -------------------------------------------

class SecondStageVAE(Module):
    """Dense VAE over latent vectors with a standard-normal prior."""

    def __init__(self, d_z: int, hidden: int, rng: RngStream):
        self.d_z = d_z
        self.enc1 = Dense(d_z, hidden, rng)
        self.enc2 = Dense(hidden, hidden, rng)
        self.enc_mean = Dense(hidden, d_z, rng)
        self.enc_log_var = Dense(hidden, d_z, rng, zero=True)
        self.dec1 = Dense(d_z, hidden, rng)
        self.dec2 = Dense(hidden, hidden, rng)
        self.dec_mean = Dense(hidden, d_z, rng)
        self.dec_log_var = param(np.zeros((1, d_z)))

    def encode(self, z) -> DiagGaussian:
        hid = ad.relu(self.enc2(ad.relu(self.enc1(z))))
        return DiagGaussian(self.enc_mean(hid), self.enc_log_var(hid))

    def decode(self, u) -> DiagGaussian:
        u = ad.as_var(u)
        hid = ad.relu(self.dec2(ad.relu(self.dec1(u))))
        mean = self.dec_mean(hid)
        return DiagGaussian(mean, self.dec_log_var + Var(np.zeros(mean.shape, dtype=mean.dtype)))

    def elbo(self, z, rng: RngStream) -> Var:
        q = self.encode(ad.as_var(z))
        u = q.sample(1.0, rng)
        return self.decode(u).log_prob(z) - q.kl_standard()

    def sample_z(self, n: int, rng: RngStream) -> np.ndarray:
        with ad.no_grad():
            u = rng.normal((n, self.d_z))
            return self.decode(u).sample(1.0, rng).value


def train_second_stage_vae(latents: np.ndarray, cfg: SecondStageConfig, rng: RngStream) -> SecondStageVAE:
    latents = np.asarray(latents, dtype=ad.get_dtype())
    model = SecondStageVAE(latents.shape[1], cfg.hidden, rng)
    params = model.named_parameters()
    opt = AdamState(lr=cfg.lr)
    n = len(latents)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            zb = latents[order[lo:lo + cfg.batch_size]]
            with Tape() as tape:
                loss = -ad.mean(model.elbo(zb, rng))
            if not math.isfinite(float(loss.value)):
                raise TrainingDiverged(f"second-stage VAE: non-finite loss at epoch {epoch + 1}")
            tape.backward(loss)
            adam_step(params, opt)
    return model

"""Diagonal Gaussian densities, temperature sampling, and KL to N(0, I)."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .rng import RngStream

LOG_VAR_MIN = -14.0
LOG_VAR_MAX = 6.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _event_axes(v: Var) -> tuple[int, ...]:
    return tuple(range(1, v.value.ndim))


class DiagGaussian:
    """N(mean, diag(exp(log_var))) with a leading batch axis.

    ``log_var`` is clamped to ``[LOG_VAR_MIN, LOG_VAR_MAX]`` on construction.
    """

    def __init__(self, mean, log_var, clamp: bool = True):
        mean, log_var = ad.as_var(mean), ad.as_var(log_var)
        if mean.shape != log_var.shape:
            raise ValueError(f"DiagGaussian: mean {mean.shape} and log_var {log_var.shape} differ")
        self.mean = mean
        self.log_var = ad.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX) if clamp else log_var

    @classmethod
    def standard(cls, shape, dtype=None) -> DiagGaussian:
        dtype = dtype or ad.get_dtype()
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def std(self) -> Var:
        return ad.exp(self.log_var * 0.5)

    def log_prob(self, x) -> Var:
        """Per-sample log density, summed over all non-batch axes."""
        x = ad.as_var(x)
        if x.shape != self.mean.shape:
            raise ValueError(f"log_prob: x shape {x.shape} does not match mean {self.mean.shape}")
        diff = x - self.mean
        inv_var = ad.exp(-self.log_var)
        terms = (self.log_var + ad.square(diff) * inv_var) * -0.5 - _HALF_LOG_2PI
        axes = _event_axes(terms)
        return ad.sum(terms, axis=axes) if axes else terms

    def sample(self, temperature: float, rng: RngStream, eps: np.ndarray | None = None) -> Var:
        """``mean + temperature * std * eps`` with eps ~ N(0, I).

        Gradients reach ``mean`` and ``log_var``, so this is also the
        reparameterized draw.
        """
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        if eps is None:
            eps = rng.normal(self.shape, dtype=self.mean.dtype)
        return self.mean + self.std * (eps * temperature).astype(self.mean.dtype)

    def kl_standard(self) -> Var:
        """Closed-form KL(self || N(0, I)), per sample."""
        # exp(v) - 1 - v >= 0 exactly; relu removes rounding below zero near v = 0
        terms = (ad.square(self.mean) + ad.relu(ad.exp(self.log_var) - 1.0 - self.log_var)) * 0.5
        axes = _event_axes(terms)
        return ad.sum(terms, axis=axes) if axes else terms

    def entropy(self) -> np.ndarray:
        lv = self.log_var.value
        return 0.5 * np.sum(math.log(2 * math.pi * math.e) + lv, axis=tuple(range(1, lv.ndim)))


def standard_normal_log_prob(x) -> Var:
    x = ad.as_var(x)
    terms = ad.square(x) * -0.5 - _HALF_LOG_2PI
    axes = _event_axes(terms)
    return ad.sum(terms, axis=axes) if axes else terms

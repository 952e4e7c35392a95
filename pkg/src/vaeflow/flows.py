"""Invertible layers with exact log-determinants, and their composition.

Pixel flows are stacks of ``ActNorm -> Inv1x1 -> AdditiveCoupling`` blocks
on (N, C, H, W) tensors, with no multi-scale squeeze/split. The latent prior
flow is a stack of dense affine couplings on (N, D) vectors.

Every layer maps data-side inputs to base-side outputs in ``forward`` and
returns ``(y, log|det dy/dx|)`` per sample; ``inverse`` runs the other way.
"""
from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Var
from .distributions import standard_normal_log_prob
from .nn import Conv2d, Dense, Module, param
from .rng import RngStream

ACTNORM_MAX_SCALE = 1e4
ACTNORM_VAR_FLOOR = 1e-8
COUPLING_MAX_LOG_SCALE = 4.0


def _zeros_logdet(x: Var) -> Var:
    return Var(np.zeros(x.shape[0], dtype=x.dtype))


class FlowLayer(Module):
    def forward(self, x: Var) -> tuple[Var, Var]:
        raise NotImplementedError

    def inverse(self, y: Var) -> Var:
        raise NotImplementedError


class ActNorm(FlowLayer):
    """Per-channel affine ``y = x * exp(log_scale) + bias``.

    The scale is stored as its log, so it can never reach exactly zero.
    """

    def __init__(self, channels: int):
        self.log_scale = param(np.zeros((1, channels, 1, 1)))
        self.bias = param(np.zeros((1, channels, 1, 1)))
        self.initialized = False

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.value).reshape(-1)

    def initialize(self, batch) -> None:
        """Data-dependent init: zero mean and unit variance per channel on ``batch``."""
        x = ad.as_var(batch).value
        if x.shape[0] < 2:
            raise ValueError("actnorm init needs at least 2 samples")
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        if np.any(var < ACTNORM_VAR_FLOOR):
            warnings.warn("actnorm init: zero-variance channel, variance floored", RuntimeWarning, stacklevel=2)
            var = np.maximum(var, ACTNORM_VAR_FLOOR)
        scale = np.minimum(1.0 / np.sqrt(var), ACTNORM_MAX_SCALE)
        self.log_scale.value[...] = np.log(scale)
        self.bias.value[...] = -mu * scale
        self.initialized = True

    def _check_ready(self) -> None:
        if not self.initialized and ad._active_tape() is not None:
            raise RuntimeError("ActNorm used for training before initialization; "
                               "call FlowStack.initialize(batch) first")

    def forward(self, x):
        self._check_ready()
        x = ad.as_var(x)
        h, w = x.shape[2], x.shape[3]
        y = x * ad.exp(self.log_scale) + self.bias
        logdet = _zeros_logdet(x) + ad.sum(self.log_scale) * float(h * w)
        return y, logdet

    def inverse(self, y):
        y = ad.as_var(y)
        return (y - self.bias) * ad.exp(-self.log_scale)


class Inv1x1(FlowLayer):
    """Invertible 1x1 convolution in LU form ``W = P L (U + diag(sign * exp(log_diag)))``.

    ``P`` and ``sign`` are fixed; ``log|det W| = sum(log_diag)``.
    """

    def __init__(self, channels: int, rng: RngStream | None = None, identity: bool = True):
        dtype = ad.get_dtype()
        c = channels
        if identity or rng is None:
            perm = np.eye(c)
            lower = np.zeros((c, c))
            upper = np.zeros((c, c))
            sign = np.ones(c)
            log_diag = np.zeros(c)
        else:
            w0 = np.linalg.qr(rng.normal((c, c), dtype=np.float64))[0]
            perm, lower, upper = scipy.linalg.lu(w0)
            d = np.diag(upper)
            sign, log_diag = np.sign(d), np.log(np.abs(d))
            lower = np.tril(lower, -1)
            upper = np.triu(upper, 1)
        self._perm = perm.astype(dtype)
        self._sign = sign.astype(dtype)
        self._lmask = np.tril(np.ones((c, c)), -1).astype(dtype)
        self._umask = np.triu(np.ones((c, c)), 1).astype(dtype)
        self._eye = np.eye(c, dtype=dtype)
        self.lower = param(lower)
        self.upper = param(upper)
        self.log_diag = param(log_diag)

    @classmethod
    def from_weight(cls, weight: np.ndarray) -> Inv1x1:
        weight = np.asarray(weight, dtype=np.float64)
        layer = cls(weight.shape[0])
        perm, lower, upper = scipy.linalg.lu(weight)
        d = np.diag(upper)
        dtype = ad.get_dtype()
        layer._perm = perm.astype(dtype)
        layer._sign = np.sign(d).astype(dtype)
        layer.lower.value[...] = np.tril(lower, -1)
        layer.upper.value[...] = np.triu(upper, 1)
        layer.log_diag.value[...] = np.log(np.abs(d))
        return layer

    def weight(self) -> Var:
        lower = self.lower * self._lmask + self._eye
        diag = self._eye * (ad.exp(self.log_diag) * self._sign)
        upper = self.upper * self._umask + diag
        return ad.matmul(ad.matmul(Var(self._perm), lower), upper)

    def forward(self, x):
        x = ad.as_var(x)
        c, h, w = x.shape[1], x.shape[2], x.shape[3]
        kernel = ad.reshape(self.weight(), (c, c, 1, 1))
        y = ad.conv2d(x, kernel)
        logdet = _zeros_logdet(x) + ad.sum(self.log_diag) * float(h * w)
        return y, logdet

    def inverse(self, y):
        y = ad.as_var(y)
        c = y.shape[1]
        w_inv = np.linalg.inv(self.weight().value.astype(np.float64)).astype(y.dtype)
        return ad.conv2d(y, w_inv.reshape(c, c, 1, 1))


class AdditiveCoupling(FlowLayer):
    """``y_b = x_b + m(x_a)`` on a channel split; volume preserving.

    ``m`` is conv3x3 -> ReLU -> conv3x3 with a zero-initialized last layer,
    so a fresh coupling is the identity.
    """

    def __init__(self, channels: int, hidden: int, rng: RngStream):
        if channels % 2:
            raise ValueError(f"AdditiveCoupling needs an even channel count, got {channels}")
        self.split_at = channels // 2
        self.conv1 = Conv2d(self.split_at, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, channels - self.split_at, 3, rng, zero=True)

    def shift(self, xa: Var) -> Var:
        return self.conv2(ad.relu(self.conv1(xa)))

    def forward(self, x):
        x = ad.as_var(x)
        xa, xb = ad.split(x, self.split_at, axis=1)
        y = ad.concat([xa, xb + self.shift(xa)], axis=1)
        return y, _zeros_logdet(x)

    def inverse(self, y):
        y = ad.as_var(y)
        ya, yb = ad.split(y, self.split_at, axis=1)
        return ad.concat([ya, yb - self.shift(ya)], axis=1)


class DenseAffineCoupling(FlowLayer):
    """RealNVP-style affine coupling on flat vectors with an alternating mask.

    Entries where ``mask == 1`` pass through and condition the shift and
    log-scale of the others. Log-scales are squashed to +-4 with tanh.
    """

    def __init__(self, dim: int, hidden: int, parity: int, rng: RngStream):
        if dim < 2:
            raise ValueError("DenseAffineCoupling needs dim >= 2")
        dtype = ad.get_dtype()
        self.dim = dim
        self._mask = (np.arange(dim) % 2 == parity).astype(dtype)
        self._free = (1.0 - self._mask).astype(dtype)
        self.fc1 = Dense(dim, hidden, rng)
        self.fc2 = Dense(hidden, hidden, rng)
        self.out = Dense(hidden, 2 * dim, rng, zero=True)

    def _shift_log_scale(self, x: Var) -> tuple[Var, Var]:
        hid = ad.relu(self.fc2(ad.relu(self.fc1(x * self._mask))))
        t, raw = ad.split(self.out(hid), self.dim, axis=1)
        lim = COUPLING_MAX_LOG_SCALE
        s = ad.tanh(raw * (1.0 / lim)) * lim * self._free
        return t * self._free, s

    def forward(self, x):
        x = ad.as_var(x)
        t, s = self._shift_log_scale(x)
        return x * ad.exp(s) + t, ad.sum(s, axis=1)

    def inverse(self, y):
        y = ad.as_var(y)
        t, s = self._shift_log_scale(y)
        return (y - t) * ad.exp(-s)


class Fold(FlowLayer):
    """Space-to-channel rearrangement (2x2 -> 4 channels); a permutation."""

    def __init__(self, factor: int = 2):
        self.factor = factor

    def _fold(self, x: Var) -> Var:
        n, c, h, w = x.shape
        f = self.factor
        if h % f or w % f:
            raise ValueError(f"Fold: spatial size {(h, w)} not divisible by {f}")
        x = ad.reshape(x, (n, c, h // f, f, w // f, f))
        x = ad.transpose(x, (0, 1, 3, 5, 2, 4))
        return ad.reshape(x, (n, c * f * f, h // f, w // f))

    def _unfold(self, y: Var) -> Var:
        n, c, h, w = y.shape
        f = self.factor
        y = ad.reshape(y, (n, c // (f * f), f, f, h, w))
        y = ad.transpose(y, (0, 1, 4, 2, 5, 3))
        return ad.reshape(y, (n, c // (f * f), h * f, w * f))

    def forward(self, x):
        x = ad.as_var(x)
        return self._fold(x), _zeros_logdet(x)

    def inverse(self, y):
        return self._unfold(ad.as_var(y))


class Unfold(Fold):
    def forward(self, x):
        x = ad.as_var(x)
        return self._unfold(x), _zeros_logdet(x)

    def inverse(self, y):
        return self._fold(ad.as_var(y))


class FlowStack(FlowLayer):
    def __init__(self, layers: list[FlowLayer]):
        self.layers = list(layers)

    def forward(self, x):
        x = ad.as_var(x)
        total = _zeros_logdet(x)
        for layer in self.layers:
            x, ld = layer.forward(x)
            total = total + ld
        return x, total

    def inverse(self, y):
        y = ad.as_var(y)
        for layer in reversed(self.layers):
            y = layer.inverse(y)
        return y

    def initialize(self, batch) -> None:
        """Run data-dependent ActNorm init layer by layer on ``batch``."""
        with ad.no_grad():
            x = ad.as_var(batch)
            for layer in self.layers:
                if isinstance(layer, ActNorm) and not layer.initialized:
                    layer.initialize(x)
                x, _ = layer.forward(x)

    def mark_initialized(self) -> None:
        """Accept current ActNorm parameters as-is (identity unless loaded)."""
        for layer in self.layers:
            if isinstance(layer, ActNorm):
                layer.initialized = True

    @property
    def initialized(self) -> bool:
        return all(l.initialized for l in self.layers if isinstance(l, ActNorm))


def build_pixel_flow(channels: int, depth: int, hidden: int, rng: RngStream,
                     fold: bool = False, random_1x1: bool = False) -> FlowStack:
    """Glow blocks at a single scale; ``fold`` wraps them in Fold/Unfold."""
    c = channels * 4 if fold else channels
    layers: list[FlowLayer] = [Fold()] if fold else []
    for _ in range(depth):
        layers.append(ActNorm(c))
        layers.append(Inv1x1(c, rng, identity=not random_1x1))
        layers.append(AdditiveCoupling(c, hidden, rng))
    if fold:
        layers.append(Unfold())
    return FlowStack(layers)


def build_prior_flow(dim: int, depth: int, hidden: int, rng: RngStream) -> FlowStack:
    if dim < 2:
        # a single coordinate cannot be split by a coupling; fall back to N(0, 1)
        return FlowStack([])
    return FlowStack([DenseAffineCoupling(dim, hidden, i % 2, rng) for i in range(depth)])


def prior_logprob(h: FlowStack, z) -> Var:
    """log p(z) = log N(h(z); 0, I) + log|det dh/dz|."""
    u, logdet = h.forward(z)
    return standard_normal_log_prob(u) + logdet

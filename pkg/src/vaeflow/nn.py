"""Parameter containers, small layers, and the Adam optimizer."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .rng import RngStream


def param(value, name: str | None = None) -> Var:
    return Var(np.asarray(value, dtype=ad.get_dtype()), requires_grad=True, name=name)


class Module:
    """Walks attributes to collect parameters under dotted names."""

    def named_parameters(self, prefix: str = "") -> dict[str, Var]:
        out: dict[str, Var] = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Var) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Var) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self) -> list[Var]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def param_hash(params: dict[str, Var]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].value).tobytes())
    return h.hexdigest()


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: RngStream, zero: bool = False):
        scale = 0.0 if zero else np.sqrt(2.0 / n_in)
        self.weight = param(rng.normal((n_in, n_out)) * scale)
        self.bias = param(np.zeros(n_out))

    def __call__(self, x: Var) -> Var:
        return ad.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: RngStream, zero: bool = False):
        scale = 0.0 if zero else np.sqrt(2.0 / (c_in * k * k))
        self.weight = param(rng.normal((c_out, c_in, k, k)) * scale)
        self.bias = param(np.zeros((1, c_out, 1, 1)))

    def __call__(self, x: Var) -> Var:
        return ad.conv2d(x, self.weight) + self.bias


class ResBlock(Module):
    """``x + conv(relu(conv(relu(x))))``; the second conv starts small."""

    def __init__(self, width: int, rng: RngStream):
        self.conv1 = Conv2d(width, width, 3, rng)
        self.conv2 = Conv2d(width, width, 3, rng)
        self.conv2.weight.value *= 0.1

    def __call__(self, x: Var) -> Var:
        return x + self.conv2(ad.relu(self.conv1(ad.relu(x))))


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Var], state: AdamState) -> None:
    """One Adam update from the accumulated grads, then zero the grads."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} does not match {name} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.lr != 0.0:
            upd = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
            p.value -= upd.astype(p.dtype, copy=False)
        p.zero_grad()

"""Fit a small dense coupling flow to 2-D banana data and check its normalization.

    python scripts/toy_flow_density.py --steps 400 --depth 2

Prints the training NLL and the total mass of exp(log p) on a [-6, 6]^2 grid.
"""
import argparse

import numpy as np

from vaeflow import autodiff as ad
from vaeflow.autodiff import Tape
from vaeflow.flows import build_prior_flow, prior_logprob
from vaeflow.nn import AdamState, adam_step
from vaeflow.rng import RngStream


def banana(rng: RngStream, n: int) -> np.ndarray:
    a = rng.normal((n,), np.float64)
    return np.stack([a, 0.5 * a**2 - 0.5 + 0.3 * rng.normal((n,), np.float64)], axis=1)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--hidden", type=int, default=16)
    ap.add_argument("--grid", type=int, default=601)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ad.set_precision(64)
    rng = RngStream(args.seed)
    h = build_prior_flow(2, args.depth, args.hidden, rng)
    params, opt = h.named_parameters(), AdamState(lr=5e-3)
    for step in range(1, args.steps + 1):
        with Tape() as tape:
            loss = -ad.mean(prior_logprob(h, banana(rng, 128)))
        tape.backward(loss)
        adam_step(params, opt)
        if step % 100 == 0:
            print(f"step {step:5d}  nll {float(loss.value):.4f}")

    g = np.linspace(-6, 6, args.grid)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    dens = np.exp(prior_logprob(h, np.stack([gx.ravel(), gy.ravel()], 1)).value).reshape(gx.shape)
    print(f"mass on [-6,6]^2: {np.trapezoid(np.trapezoid(dens, g, axis=1), g):.6f}")


if __name__ == "__main__":
    main()

"""Sample grids and Fréchet proxy across sampling temperatures for a trained run.

    python scripts/temperature_sweep.py runs/desk --temps 0 0.25 0.5 0.75 1.0

Writes ``sweep_T<t>.pgm`` beside the checkpoint and prints one row per T.
The proxy uses PCA pixel features and is not comparable to FID.
"""
import argparse
import os

from vaeflow import autodiff as ad
from vaeflow import cli
from vaeflow.checkpoint import load_checkpoint
from vaeflow.config import load
from vaeflow.data import dequantize
from vaeflow.hybrid import sample
from vaeflow.metrics import export_grid, feasible_k, frechet_proxy
from vaeflow.rng import RngStream


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir")
    ap.add_argument("--temps", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    echo = os.path.join(args.run_dir, "config.train-glow.resolved")
    cfg = load(echo if os.path.isfile(echo) else None)
    model = load_checkpoint(os.path.join(args.run_dir, cli.FINAL_CKPT))
    ad.set_precision(32 if next(iter(model.named_parameters().values())).dtype.itemsize == 4 else 64)
    ds = cli.build_dataset(cfg)
    real = dequantize(ds.test, RngStream(cfg.eval.seed))
    n_fake = cfg.eval.fake_multiplier * len(ds.test)
    k = feasible_k(cfg.eval.frechet_k, ds.dims, len(real), n_fake)

    print(f"{'T':>5}  proxy(k={k})")
    for t in args.temps:
        fake = sample(model, n_fake, t, RngStream(args.seed))
        export_grid(fake[:64].clip(0, 1), 8, os.path.join(args.run_dir, f"sweep_T{t:g}.pgm"))
        print(f"{t:5.2f}  {frechet_proxy(real, fake, k):.4f}")


if __name__ == "__main__":
    main()

"""Run the whole desk-scale pipeline into one output directory.

    python scripts/run_desk_pipeline.py --out runs/desk [--config my.cfg] [--set key=value ...]

Runs train-vae, train-glow, sample, interpolate, eval, compare-prior and
report in order, stopping at the first non-zero exit code.
"""
import argparse
import sys
import time

from vaeflow import cli

STEPS = ("train-vae", "train-glow", "sample", "interpolate", "eval", "compare-prior", "report")


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()

    common = ["--out", args.out]
    if args.config:
        common += ["--config", args.config]
    for kv in args.overrides:
        common += ["--set", kv]

    for step in STEPS:
        t0 = time.perf_counter()
        code = cli.main([step, *common])
        print(f"[{step}] exit {code} in {time.perf_counter() - t0:.1f} s", flush=True)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())

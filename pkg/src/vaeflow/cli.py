"""Command-line pipeline: train-vae, train-glow, sample, interpolate, eval,
compare-prior, report.

Exit codes: 0 success, 1 runtime failure, 2 precondition/config failure.
Failures print one line to stderr: ``error: <reason> [detail]``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint, restore_rng, save_checkpoint
from .config import ConfigError, RunConfig
from .data import Dataset, DataFormatError, dequantize, load_idx, synth_dataset
from .hybrid import (HybridModel, Phase, interpolate, sample, sample_latents, sample_vae,
                     sharpen_pair, train_glow_phase2)
from .metrics import (PROXY_LABEL, EvalReport, export_grid, feasible_k, format_timing,
                      frechet_proxy, mean_nll_bound, nll_to_bits, timing_report)
from .rng import RngStream
from .vae import TrainingDiverged, train_second_stage_vae, train_vae_phase1

log = logging.getLogger("vaeflow")

COMMANDS = ("train-vae", "train-glow", "sample", "interpolate", "eval", "compare-prior", "report")
PHASE1_CKPT = "phase1.fvae"
FINAL_CKPT = "final.fvae"
VAE_LOG = "metrics_vae.csv"
GLOW_LOG = "metrics_glow.csv"


class Precondition(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(reason)
        self.reason, self.detail = reason, detail


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.kind == "idx":
        return load_idx(d.idx_path, test_fraction=d.test_fraction)
    return synth_dataset(d.kind, d.n, (d.height, d.width), RngStream(d.seed),
                         test_fraction=d.test_fraction, idx_path=d.idx_path)


def _path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out, name)


def _echo_config(cfg: RunConfig, command: str) -> None:
    with open(_path(cfg, f"config.{command}.resolved"), "w") as fh:
        fh.write(config_mod.dump(cfg))


def _load(cfg: RunConfig, name: str, reason: str) -> HybridModel:
    path = _path(cfg, name)
    if not os.path.isfile(path):
        raise Precondition(reason, path)
    return load_checkpoint(path)


def _load_latest(cfg: RunConfig) -> HybridModel:
    if os.path.isfile(_path(cfg, FINAL_CKPT)):
        return load_checkpoint(_path(cfg, FINAL_CKPT))
    raise Precondition("final-checkpoint-missing", _path(cfg, FINAL_CKPT))


def cmd_train_vae(cfg: RunConfig) -> None:
    ds = build_dataset(cfg)
    ckpt, log_path = _path(cfg, PHASE1_CKPT), _path(cfg, VAE_LOG)
    if cfg.train.resume and os.path.isfile(ckpt):
        model = load_checkpoint(ckpt)
        rng = restore_rng(model) or RngStream(cfg.seed)
    else:
        rng = RngStream(cfg.seed)
        model = HybridModel(ds.shape, cfg.model, rng)
        if os.path.exists(log_path):
            os.remove(log_path)
    model.state.run_config_text = config_mod.dump(cfg)
    train_vae_phase1(model, ds.train, cfg.train, rng, log_path,
                     on_epoch_end=lambda e: save_checkpoint(model, ckpt, rng))
    save_checkpoint(model, ckpt, rng)
    log.info("phase 1 done: %s", ckpt)


def cmd_train_glow(cfg: RunConfig) -> None:
    final, log_path = _path(cfg, FINAL_CKPT), _path(cfg, GLOW_LOG)
    if cfg.train.resume and os.path.isfile(final):
        model = load_checkpoint(final)
    else:
        model = _load(cfg, PHASE1_CKPT, "phase1-checkpoint-missing")
        if model.phase == Phase.VAE:
            raise Precondition("phase1-incomplete", _path(cfg, PHASE1_CKPT))
        if os.path.exists(log_path):
            os.remove(log_path)
    ds = build_dataset(cfg)
    rng = restore_rng(model) or RngStream(cfg.seed)
    train_glow_phase2(model, ds.train, cfg.train, rng, log_path,
                      on_epoch_end=lambda e: save_checkpoint(model, final, rng))
    save_checkpoint(model, final, rng)
    log.info("phase 2 done: %s", final)


def cmd_sample(cfg: RunConfig) -> None:
    model = _load_latest(cfg)
    s = cfg.sample
    rng = RngStream(cfg.seed)
    export_grid(sample(model, s.n, s.temperature, rng), s.cols, _path(cfg, "samples.pgm" if model.shape[0] == 1 else "samples.ppm"))
    rng = RngStream(cfg.seed)
    export_grid(sample_vae(model, s.n, 0.0, rng), s.cols, _path(cfg, _ext(model, "vae_samples")))
    rng = RngStream(cfg.seed)
    z = sample_latents(model, s.cols, rng)
    vae_img, glow_img = sharpen_pair(model, z, rng, s.temperature)
    export_grid(np.concatenate([vae_img, glow_img]), s.cols, _path(cfg, _ext(model, "sharpen")))


def _ext(model: HybridModel, stem: str) -> str:
    return f"{stem}.pgm" if model.shape[0] == 1 else f"{stem}.ppm"


def cmd_interpolate(cfg: RunConfig) -> None:
    model = _load_latest(cfg)
    s = cfg.sample
    rng = RngStream(cfg.seed)
    rows = []
    for _ in range(s.interp_pairs):
        z = sample_latents(model, 2, rng)
        rows.append(interpolate(model, z[0], z[1], s.interp_steps, s.temperature, rng))
    export_grid(np.concatenate(rows), s.interp_steps, _path(cfg, _ext(model, "interpolation")))


def cmd_eval(cfg: RunConfig) -> None:
    model = _load_latest(cfg)
    ds = build_dataset(cfg)
    e = cfg.eval
    nll = mean_nll_bound(model, ds.test, e.n_mc, RngStream(e.seed), use_flow=True)
    nll_vae = mean_nll_bound(model, ds.test, e.n_mc, RngStream(e.seed), use_flow=False)
    n_fake = e.fake_multiplier * len(ds.test)
    fake = sample(model, n_fake, cfg.sample.temperature, RngStream(cfg.seed))
    real = dequantize(ds.test, RngStream(e.seed))
    k = feasible_k(e.frechet_k, ds.dims, len(real), len(fake))
    if k != e.frechet_k:
        log.warning("frechet proxy: k reduced from %d to %d (sample-count / dimension limit)", e.frechet_k, k)
    timing = {}
    if os.path.isfile(_path(cfg, VAE_LOG)) and os.path.isfile(_path(cfg, GLOW_LOG)):
        timing = timing_report(_path(cfg, VAE_LOG), _path(cfg, GLOW_LOG))
    report = EvalReport(bits_per_dim=nll_to_bits(nll, ds.dims), nll_bound_nats=nll, n_mc=e.n_mc,
                        frechet_proxy=frechet_proxy(real, fake, k), dims=ds.dims,
                        vae_bits_per_dim=nll_to_bits(nll_vae, ds.dims), timing=timing,
                        config_hash=cfg.hash())
    with open(_path(cfg, "eval.csv"), "w") as fh:
        fh.write(report.to_csv())
    with open(_path(cfg, "eval.txt"), "w") as fh:
        fh.write(report.to_text())
    print(report.to_text(), end="")


def compare_prior(model: HybridModel, ds: Dataset, cfg: RunConfig) -> dict[str, float]:
    """Fréchet proxy of decoder-mean samples under the flow prior vs a second-stage VAE."""
    rng = RngStream(cfg.seed)
    with ad.no_grad():
        latents = model.encoder(dequantize(ds.train, rng)).mean.value
    second = train_second_stage_vae(latents, cfg.second_stage, rng)
    n_fake = cfg.eval.fake_multiplier * len(ds.test)
    z_flow = sample_latents(model, n_fake, rng)
    z_two = second.sample_z(n_fake, rng)
    with ad.no_grad():
        x_flow = model.decoder.mean(z_flow).value
        x_two = model.decoder.mean(z_two).value
    real = dequantize(ds.test, RngStream(cfg.eval.seed))
    k = feasible_k(cfg.eval.frechet_k, ds.dims, len(real), n_fake)
    return {"flow_prior": frechet_proxy(real, x_flow, k),
            "second_stage_vae": frechet_proxy(real, x_two, k), "k": k}


def cmd_compare_prior(cfg: RunConfig) -> None:
    path = _path(cfg, FINAL_CKPT) if os.path.isfile(_path(cfg, FINAL_CKPT)) else _path(cfg, PHASE1_CKPT)
    if not os.path.isfile(path):
        raise Precondition("phase1-checkpoint-missing", path)
    model = load_checkpoint(path)
    if model.phase == Phase.VAE:
        raise Precondition("phase1-incomplete", path)
    res = compare_prior(model, build_dataset(cfg), cfg)
    better = "flow prior" if res["flow_prior"] < res["second_stage_vae"] else "second-stage VAE"
    text = (f"latent prior comparison, VAE decoder-mean samples, {PROXY_LABEL}, k={res['k']}\n"
            f"flow prior          {res['flow_prior']:.4f}\n"
            f"second-stage VAE    {res['second_stage_vae']:.4f}\n"
            f"lower (better): {better} (desk-scale, informational)\n")
    with open(_path(cfg, "compare_prior.txt"), "w") as fh:
        fh.write(text)
    with open(_path(cfg, "compare_prior.csv"), "w") as fh:
        fh.write("prior,frechet_proxy_not_fid\n")
        fh.write(f"flow_prior,{res['flow_prior']!r}\nsecond_stage_vae,{res['second_stage_vae']!r}\n")
    print(text, end="")


def cmd_report(cfg: RunConfig) -> None:
    vae_log, glow_log = _path(cfg, VAE_LOG), _path(cfg, GLOW_LOG)
    for p in (vae_log, glow_log):
        if not os.path.isfile(p):
            raise Precondition("metric-logs-missing", p)
    text = format_timing(timing_report(vae_log, glow_log))
    with open(_path(cfg, "timing.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")


HANDLERS = {
    "train-vae": cmd_train_vae,
    "train-glow": cmd_train_glow,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "eval": cmd_eval,
    "compare-prior": cmd_compare_prior,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vaeflow", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--epochs", type=int, help="epochs for the phase this command trains")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    if args.temperature is not None:
        overrides.append(f"sample.temperature={args.temperature}")
    if args.epochs is not None:
        key = {"train-vae": "train.vae_epochs", "train-glow": "train.glow_epochs",
               "compare-prior": "second_stage.epochs"}.get(args.command)
        if key:
            overrides.append(f"{key}={args.epochs}")
    cfg = config_mod.load(args.config, overrides)
    cfg.validate()
    return cfg


def _fail(code: int, reason: str, detail: str = "") -> int:
    detail = " ".join(str(detail).split())
    print(f"error: {reason}" + (f" {detail}" if detail else ""), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        return _fail(2, "config-invalid", exc)
    ad.set_precision(cfg.train.precision)
    try:
        os.makedirs(cfg.out, exist_ok=True)
        _echo_config(cfg, args.command)
        HANDLERS[args.command](cfg)
    except Precondition as exc:
        return _fail(2, exc.reason, exc.detail)
    except (CheckpointError, DataFormatError, FileNotFoundError) as exc:
        return _fail(2, "input-invalid", exc)
    except TrainingDiverged as exc:
        return _fail(1, "training-diverged", exc)
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        return _fail(1, "runtime-failure", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

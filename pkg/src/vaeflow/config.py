"""Run configuration: dataclasses plus a line-oriented ``key = value`` format.

Keys are dotted by section (``model.d_z = 16``); ``[section]`` headers are
also accepted and prefix the keys that follow. ``#`` starts a comment.
Precedence is overrides > file > defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "blobs"  # blobs | bars | digits-subset | idx
    n: int = 500
    height: int = 8
    width: int = 8
    test_fraction: float = 0.2
    seed: int = 7
    idx_path: str = ""


@dataclass
class ModelConfig:
    d_z: int = 16
    enc_width: int = 32
    dec_width: int = 32
    res_depth: int = 2
    decoder_variance: str = "diag"  # diag | gamma
    decoder_log_var_init: float = -4.0
    glow_depth: int = 8
    glow_hidden: int = 32
    prior_depth: int = 16
    prior_hidden: int = 64
    fold: str = "auto"  # auto | on | off
    actnorm_data_init: bool = True


@dataclass
class TrainConfig:
    vae_epochs: int = 200
    glow_epochs: int = 200
    batch_size: int = 50
    lr: float = 1e-3
    lr_halve_every: int = 100  # epochs; 0 disables
    precision: int = 32
    resume: bool = False


@dataclass
class SampleConfig:
    temperature: float = 0.5
    n: int = 64
    cols: int = 8
    interp_pairs: int = 4
    interp_steps: int = 8


@dataclass
class EvalConfig:
    n_mc: int = 64
    seed: int = 1234
    frechet_k: int = 64
    fake_multiplier: int = 10


@dataclass
class SecondStageConfig:
    epochs: int = 300
    hidden: int = 64
    batch_size: int = 50
    lr: float = 1e-3


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    second_stage: SecondStageConfig = field(default_factory=SecondStageConfig)

    def validate(self) -> None:
        m, t = self.model, self.train
        for name in ("glow_depth", "prior_depth", "res_depth", "d_z"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if t.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if t.precision not in (32, 64):
            raise ConfigError("train.precision must be 32 or 64")
        if m.decoder_variance not in ("diag", "gamma"):
            raise ConfigError("model.decoder_variance must be diag or gamma")
        if m.fold not in ("auto", "on", "off"):
            raise ConfigError("model.fold must be auto, on or off")
        if self.data.kind in ("digits-subset", "idx") and not os.path.isfile(self.data.idx_path):
            raise ConfigError(f"data.idx_path not found: {self.data.idx_path!r}")
        if not 0 < self.data.test_fraction < 1:
            raise ConfigError("data.test_fraction must be in (0, 1)")

    def hash(self) -> str:
        return hashlib.sha256(dump(self).encode()).hexdigest()[:16]


def _coerce(raw: str, typ, key: str):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def set_key(cfg: RunConfig, key: str, raw: str) -> None:
    obj = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
            raise ConfigError(f"unknown config key: {key}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    hints = typing.get_type_hints(type(obj))
    if leaf not in hints or dataclasses.is_dataclass(hints[leaf]):
        raise ConfigError(f"unknown config key: {key}")
    setattr(obj, leaf, _coerce(raw.strip(), hints[leaf], key))


def parse(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        set_key(cfg, f"{section}.{key}" if section else key, val)
    return cfg


def load(path: str | None = None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                parse(fh.read(), cfg)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, val = item.split("=", 1)
        set_key(cfg, key.strip(), val)
    return cfg


def _flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    rows = []
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            rows.extend(_flatten(val, f"{prefix}{f.name}."))
        else:
            rows.append((prefix + f.name, val))
    return rows


def _fmt(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    return str(val)


def dump(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in _flatten(cfg))

"""Portable binary checkpoints.

Layout (little-endian)::

    b"FVAE" | u32 version | u32 phase | u32 n_entries
    n_entries x ( u32 name_len | utf-8 name | u8 dtype | u32 ndim | ndim x u32 | payload )
    u32 crc32 of every preceding byte

dtype codes: 1 float32, 2 float64, 3 int64, 4 uint64, 5 uint8. Parameters,
optimizer moments, ActNorm init flags, fixed 1x1-conv factors, epoch
counters, and the random stream state are all stored, so resuming from a
checkpoint continues a run bitwise.
"""
from __future__ import annotations

import dataclasses
import os
import struct
import tempfile
import zlib

import numpy as np

from . import autodiff as ad
from .config import ConfigError, ModelConfig, _fmt, set_key, RunConfig
from .flows import ActNorm, Inv1x1
from .hybrid import HybridModel, Phase
from .nn import AdamState
from .rng import RngStream

MAGIC = b"FVAE"
VERSION = 1
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("<u8"): 4, np.dtype("u1"): 5}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


class CheckpointCRCError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in _CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name}")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def encode(phase: int, entries: dict[str, np.ndarray]) -> bytes:
    body = MAGIC + struct.pack("<III", VERSION, int(phase), len(entries))
    body += b"".join(_entry(k, v) for k, v in entries.items())
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(raw: bytes) -> tuple[int, dict[str, np.ndarray]]:
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {raw[:4]!r})")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointCRCError("checkpoint CRC mismatch")
    version, phase, count = struct.unpack_from("<III", body, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    off = 16
    entries = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            code, ndim = struct.unpack_from("<BI", body, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape)) * dt.itemsize
            if off + nbytes > len(body):
                raise CheckpointError(f"truncated payload for entry {name}")
            entries[name] = np.frombuffer(body, dt, int(np.prod(shape)), off).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return phase, entries


def _model_config_text(cfg: ModelConfig) -> str:
    return "".join(f"{f.name} = {_fmt(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def _parse_model_config(text: str) -> ModelConfig:
    holder = RunConfig()
    for line in text.splitlines():
        if line.strip():
            key, val = line.split("=", 1)
            set_key(holder, "model." + key.strip(), val)
    return holder.model


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def _opt_entries(prefix: str, opt: AdamState) -> dict[str, np.ndarray]:
    out = {f"{prefix}/hyper": np.array([opt.lr, opt.beta1, opt.beta2, opt.eps], dtype=np.float64),
           f"{prefix}/step": np.array([opt.step], dtype=np.int64)}
    for name in opt.m:
        out[f"{prefix}/m/{name}"] = opt.m[name]
        out[f"{prefix}/v/{name}"] = opt.v[name]
    return out


def _opt_from(prefix: str, entries: dict[str, np.ndarray]) -> AdamState | None:
    if f"{prefix}/hyper" not in entries:
        return None
    lr, b1, b2, eps = entries[f"{prefix}/hyper"].tolist()
    opt = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=int(entries[f"{prefix}/step"][0]))
    for key, arr in entries.items():
        if key.startswith(f"{prefix}/m/"):
            name = key[len(prefix) + 3:]
            opt.m[name] = arr
            opt.v[name] = entries[f"{prefix}/v/{name}"]
    return opt


def _layers(model: HybridModel):
    for stack_name, stack in (("prior", model.prior), ("pixel_flow", model.pixel_flow)):
        for i, layer in enumerate(stack.layers):
            yield f"{stack_name}.layers.{i}", layer


def model_entries(model: HybridModel, rng: RngStream | None = None) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {
        "meta/shape": np.array(model.shape, dtype=np.int64),
        "meta/model_config": _text(_model_config_text(model.cfg)),
    }
    if model.state.run_config_text:
        entries["meta/run_config"] = _text(model.state.run_config_text)
    for name, p in model.named_parameters().items():
        entries[f"param/{name}"] = p.value
    for name, layer in _layers(model):
        if isinstance(layer, ActNorm):
            entries[f"flag/{name}.initialized"] = np.array([layer.initialized], dtype=np.uint8)
        elif isinstance(layer, Inv1x1):
            entries[f"buffer/{name}.perm"] = layer._perm
            entries[f"buffer/{name}.sign"] = layer._sign
    entries["state/epochs"] = np.array([model.state.vae_epochs, model.state.glow_epochs], dtype=np.int64)
    if model.state.vae_opt is not None:
        entries.update(_opt_entries("opt/vae", model.state.vae_opt))
    if model.state.glow_opt is not None:
        entries.update(_opt_entries("opt/glow", model.state.glow_opt))
    rng_state = rng.get_state() if rng is not None else model.state.rng_state
    if rng_state is not None:
        entries["rng/state"] = np.asarray(rng_state, dtype=np.uint64)
    return entries


def save_checkpoint(model: HybridModel, path: str, rng: RngStream | None = None) -> None:
    """Write atomically (temp file + rename)."""
    raw = encode(int(model.phase), model_entries(model, rng))
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str, model_cfg: ModelConfig | None = None) -> HybridModel:
    """Rebuild the model stored at ``path``.

    With ``model_cfg`` the model is built from that config and every stored
    tensor must match its shape; otherwise the embedded config is used.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc.strerror})") from None
    phase, entries = decode(raw)
    if phase not in tuple(Phase):
        raise CheckpointError(f"unknown phase flag {phase}")
    stored_cfg = _parse_model_config(bytes(entries["meta/model_config"]).decode("utf-8"))
    cfg = model_cfg or stored_cfg
    shape = tuple(int(s) for s in entries["meta/shape"])
    dtype = entries[next(k for k in entries if k.startswith("param/"))].dtype
    bits = 64 if dtype == np.float64 else 32
    with ad.precision(bits):
        try:
            model = HybridModel(shape, cfg, RngStream(0))
        except (ValueError, ConfigError) as exc:
            raise CheckpointShapeError(f"config incompatible with checkpoint: {exc}") from None
    params = model.named_parameters()
    stored = {k[6:] for k in entries if k.startswith("param/")}
    if stored != set(params):
        missing = sorted(set(params) ^ stored)[:3]
        raise CheckpointShapeError(f"parameter set differs from config (e.g. {missing})")
    for name, p in params.items():
        arr = entries[f"param/{name}"]
        if arr.shape != p.shape:
            raise CheckpointShapeError(f"{name}: checkpoint shape {arr.shape} vs config {p.shape}")
        p.value = arr.copy()
        p.zero_grad()
    for name, layer in _layers(model):
        if isinstance(layer, ActNorm):
            layer.initialized = bool(entries[f"flag/{name}.initialized"][0])
        elif isinstance(layer, Inv1x1):
            layer._perm = entries[f"buffer/{name}.perm"].copy()
            layer._sign = entries[f"buffer/{name}.sign"].copy()
    model.phase = Phase(phase)
    model.state.vae_epochs, model.state.glow_epochs = (int(v) for v in entries["state/epochs"])
    model.state.vae_opt = _opt_from("opt/vae", entries)
    model.state.glow_opt = _opt_from("opt/glow", entries)
    model.state.rng_state = entries.get("rng/state")
    if "meta/run_config" in entries:
        model.state.run_config_text = bytes(entries["meta/run_config"]).decode("utf-8")
    return model


def restore_rng(model: HybridModel) -> RngStream | None:
    if model.state.rng_state is None:
        return None
    return RngStream.from_state(model.state.rng_state)

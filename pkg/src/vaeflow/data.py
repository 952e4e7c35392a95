"""Datasets, IDX parsing, uniform dequantization, and PGM/PPM export.

Images are held as N x C x H x W arrays of quantized values ``k / 256``
(k in 0..255). :func:`dequantize` turns them into continuous samples
``(k + u) / 256`` in [0, 1).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import RngStream

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    train: np.ndarray
    test: np.ndarray
    source: str = ""
    train_labels: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.train.shape[1:])

    @property
    def dims(self) -> int:
        return int(np.prod(self.shape))


def quantize(values: np.ndarray) -> np.ndarray:
    """Map continuous [0, 1] intensities onto the 8-bit grid ``k / 256``."""
    k = np.clip(np.floor(np.asarray(values, dtype=np.float64) * 256.0), 0, 255)
    return k / 256.0


def dequantize(images: np.ndarray, rng: RngStream, dtype=None) -> np.ndarray:
    """``(k + u) / 256`` with u ~ U[0, 1) per element; strictly inside [0, 1)."""
    dtype = dtype or ad.get_dtype()
    k = np.round(np.asarray(images, dtype=np.float64) * 256.0)
    u = rng.uniform(k.shape, dtype=np.float64)
    out = ((k + u) / 256.0).astype(dtype)
    return np.minimum(out, np.nextafter(dtype(1.0), dtype(0.0)))


def split(images: np.ndarray, test_fraction: float, labels=None, source: str = "") -> Dataset:
    n_test = max(1, int(round(len(images) * test_fraction)))
    n_train = len(images) - n_test
    if n_train < 1:
        raise ValueError(f"dataset of {len(images)} images too small to split")
    lab_tr = lab_te = None
    if labels is not None:
        lab_tr, lab_te = labels[:n_train], labels[n_train:]
    return Dataset(images[:n_train], images[n_train:], source, lab_tr, lab_te)


# --- IDX -------------------------------------------------------------------

def read_idx(path: str) -> np.ndarray:
    """Parse an IDX/ubyte file into an array of its declared shape."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read ({exc.strerror})") from None
    if len(raw) == 0:
        raise DataFormatError(f"{path}: empty file")
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    zero, code, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
    if zero != 0 or code not in _IDX_DTYPES or ndim == 0:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dt = np.dtype(_IDX_DTYPES[code])
    need = int(np.prod(dims)) * dt.itemsize
    if len(raw) - header < need:
        raise DataFormatError(f"{path}: truncated payload ({len(raw) - header} of {need} bytes)")
    return np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=header).reshape(dims)


def load_idx(path: str, labels_path: str | None = None, test_fraction: float = 0.2) -> Dataset:
    """Load 8-bit images (magic 0x00000803) scaled by 1/256, optionally with labels (0x00000801)."""
    arr = read_idx(path)
    if arr.ndim != 3 or arr.dtype != np.uint8:
        raise DataFormatError(f"{path}: expected 3-D ubyte images, got shape {arr.shape} dtype {arr.dtype}")
    images = arr[:, None, :, :].astype(np.float64) / 256.0
    labels = None
    if labels_path:
        labels = read_idx(labels_path)
        if labels.ndim != 1 or len(labels) != len(images):
            raise DataFormatError(f"{labels_path}: labels do not match {len(images)} images")
    return split(images, test_fraction, labels, source=f"idx:{os.path.basename(path)}")


def write_idx(path: str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x0800 | arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


# --- synthetic data --------------------------------------------------------

def _blobs(n: int, h: int, w: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    imgs = np.zeros((n, 1, h, w))
    centers = np.zeros((n, 2, 2))
    for i in range(n):
        img = np.zeros((h, w))
        for b in range(2):
            cy = rng.uniform((), np.float64) * (h - 1)
            cx = rng.uniform((), np.float64) * (w - 1)
            sigma = 0.8 + 0.8 * rng.uniform((), np.float64)
            amp = 0.5 + 0.45 * rng.uniform((), np.float64)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            centers[i, b] = (cy, cx)
        imgs[i, 0] = np.minimum(img, 0.999)
    # label: quadrant of the first blob
    labels = (centers[:, 0, 0] >= (h - 1) / 2).astype(int) * 2 + (centers[:, 0, 1] >= (w - 1) / 2)
    return quantize(imgs), labels


def _bars(n: int, h: int, w: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    imgs = np.zeros((n, 1, h, w))
    labels = rng.integers(0, 2, size=n)
    for i in range(n):
        length = h if labels[i] == 0 else w
        levels = 0.1 + 0.8 * rng.uniform((length,), np.float64)
        levels[rng.integers(0, length)] = 0.95  # at least one bright stripe
        imgs[i, 0] = levels[:, None] if labels[i] == 0 else levels[None, :]
    return quantize(imgs), labels


def _digits(n: int, h: int, w: int, path: str) -> tuple[np.ndarray, None]:
    from PIL import Image

    if not path or not os.path.isfile(path):
        raise FileNotFoundError(
            f"digits-subset needs a local IDX image file (e.g. train-images-idx3-ubyte); "
            f"none found at {path!r}. Place the file locally and set data.idx_path; nothing is downloaded.")
    arr = read_idx(path)[:n]
    out = np.zeros((len(arr), 1, h, w))
    for i, img in enumerate(arr):
        small = Image.fromarray(np.asarray(img, dtype=np.uint8)).resize((w, h), Image.BOX)
        out[i, 0] = np.asarray(small, dtype=np.float64) / 256.0
    return quantize(out), None


def synth_dataset(kind: str, n: int, size: tuple[int, int], rng: RngStream,
                  test_fraction: float = 0.2, idx_path: str = "") -> Dataset:
    """Deterministic desk-scale dataset. ``kind`` is blobs, bars or digits-subset."""
    h, w = size
    if n < 4 or h < 4 or w < 4:
        raise ValueError(f"synth_dataset needs n >= 4 and size >= 4x4, got n={n} size={size}")
    if kind == "blobs":
        images, labels = _blobs(n, h, w, rng)
    elif kind == "bars":
        images, labels = _bars(n, h, w, rng)
    elif kind == "digits-subset":
        images, labels = _digits(n, h, w, idx_path)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return split(images, test_fraction, labels, source=f"{kind}:{n}:{h}x{w}")


# --- PGM / PPM -------------------------------------------------------------

def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path: str, image: np.ndarray) -> None:
    """Binary PGM (C=1) or PPM (C=3) from a C x H x W array in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"write_pnm expects 1 or 3 channels, got shape {img.shape}")
    c, h, w = img.shape
    pix = to_uint8(img)
    body = pix[0] if c == 1 else pix.transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(body).tobytes())


def read_pnm(path: str) -> np.ndarray:
    """Inverse of :func:`write_pnm` for files it produced; returns uint8 C x H x W."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    magic, (w, h), body = parts[0], map(int, parts[1].split()), parts[3]
    if magic == b"P5":
        return np.frombuffer(body, np.uint8).reshape(1, h, w)
    return np.frombuffer(body, np.uint8).reshape(h, w, 3).transpose(2, 0, 1)

"""Bits/dim bounds, a PCA-feature Fréchet proxy, image grids, and timing tables.

The Fréchet number here is computed on linear PCA features of raw pixels.
It is a desk-scale stand-in and is NOT comparable to Inception-based FID.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import dequantize, write_pnm
from .rng import RngStream

PROXY_LABEL = "frechet proxy (PCA pixel features; not FID)"
EIG_FLOOR = 1e-8


def bits_per_dim(model, images: np.ndarray, n_mc: int, rng: RngStream, *,
                 dequantize_input: bool = True, batch_size: int = 100, **bound_kwargs) -> float:
    """Upper bound on bits/dim: mean of -bound / (D ln 2) + 8 over ``images``.

    ``model`` only needs ``log_likelihood_bound(x, n_mc, rng, **kw)`` returning
    per-sample nats for inputs scaled to [0, 1). The +8 accounts for the
    1/256 bin width of 8-bit data.
    """
    return nll_to_bits(mean_nll_bound(model, images, n_mc, rng, dequantize_input=dequantize_input,
                                      batch_size=batch_size, **bound_kwargs), dims_of(images))


def dims_of(images: np.ndarray) -> int:
    return int(np.prod(np.asarray(images).shape[1:]))


def nll_to_bits(nll_nats: float, dims: int) -> float:
    return nll_nats / (dims * math.log(2)) + 8.0


def mean_nll_bound(model, images: np.ndarray, n_mc: int, rng: RngStream, *,
                   dequantize_input: bool = True, batch_size: int = 100, **bound_kwargs) -> float:
    x = dequantize(images, rng) if dequantize_input else np.asarray(images)
    total = 0.0
    for lo in range(0, len(x), batch_size):
        bound = np.asarray(model.log_likelihood_bound(x[lo:lo + batch_size], n_mc, rng, **bound_kwargs),
                           dtype=np.float64)
        total += float(np.sum(bound))
    return -total / len(x)


# --- Fréchet proxy ---------------------------------------------------------

def pca_basis(real: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and top-``k`` principal directions (D x k) of the flattened real set."""
    flat = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
    mean = flat.mean(axis=0)
    _, _, vt = np.linalg.svd(flat - mean, full_matrices=False)
    return mean, vt[:k].T


def _sqrtm_psd(c: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((c + c.T) / 2)
    return (vecs * np.sqrt(np.maximum(vals, EIG_FLOOR))) @ vecs.T


def frechet_gaussian(m1: np.ndarray, c1: np.ndarray, m2: np.ndarray, c2: np.ndarray) -> float:
    """||m1 - m2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}).

    tr((C1 C2)^{1/2}) is taken from the eigenvalues of the symmetric
    product C1^{1/2} C2 C1^{1/2}, floored at 1e-8.
    """
    s1 = _sqrtm_psd(c1)
    mid = s1 @ c2 @ s1
    vals = np.linalg.eigvalsh((mid + mid.T) / 2)
    tr_sqrt = float(np.sum(np.sqrt(np.maximum(vals, EIG_FLOOR))))
    diff = np.asarray(m1) - np.asarray(m2)
    return max(float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt), 0.0)


def frechet_proxy(real: np.ndarray, fake: np.ndarray, k: int = 64,
                  basis: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    """Fréchet distance between Gaussian fits of top-``k`` PCA features.

    The basis comes from ``real`` unless given, which makes the proxy
    asymmetric in its arguments.
    """
    real = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
    fake = np.asarray(fake, dtype=np.float64).reshape(len(fake), -1)
    d = real.shape[1]
    if fake.shape[1] != d:
        raise ValueError(f"frechet_proxy: feature sizes differ ({d} vs {fake.shape[1]})")
    if k > d:
        raise ValueError(f"frechet_proxy: k={k} exceeds dimension {d}")
    if len(real) < 2 * k or len(fake) < 2 * k:
        raise ValueError(f"frechet_proxy: need >= {2 * k} samples per side, got {len(real)} and {len(fake)}")
    mean, vecs = basis if basis is not None else pca_basis(real, k)
    fr = (real - mean) @ vecs
    ff = (fake - mean) @ vecs
    c1 = np.atleast_2d(np.cov(fr, rowvar=False))
    c2 = np.atleast_2d(np.cov(ff, rowvar=False))
    return frechet_gaussian(fr.mean(axis=0), c1, ff.mean(axis=0), c2)


def feasible_k(k: int, dims: int, n_real: int, n_fake: int) -> int:
    return max(1, min(k, dims, n_real // 2, n_fake // 2))


# --- image grids -------------------------------------------------------------

def tile(images: np.ndarray, cols: int) -> np.ndarray:
    """Row-major tiling with 1-pixel black gutters between tiles."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("export_grid: empty batch")
    n, c, h, w = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    grid = np.zeros((c, rows * h + rows - 1, cols * w + cols - 1), dtype=np.float64)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        grid[:, r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = img
    return grid


def export_grid(images: np.ndarray, cols: int, path: str) -> str:
    folder = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(folder) or not os.access(folder, os.W_OK):
        raise OSError(f"export_grid: cannot write to {path}")
    write_pnm(path, tile(images, cols))
    return path


# --- timing ---------------------------------------------------------------

def read_metric_log(path: str) -> list[dict]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"metric log missing: {path}")
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def timing_report(vae_log: str, glow_log: str) -> dict[str, float]:
    """Mean wall seconds per epoch for each phase and their average."""
    vae = [r["wall_seconds"] for r in read_metric_log(vae_log)]
    glow = [r["wall_seconds"] for r in read_metric_log(glow_log)]
    if not vae or not glow:
        raise ValueError("timing_report: empty metric log")
    t_vae, t_glow = float(np.mean(vae)), float(np.mean(glow))
    return {"VAE": t_vae, "Glow": t_glow, "Avg.": (t_vae + t_glow) / 2}


def format_timing(table: dict[str, float]) -> str:
    lines = ["phase     time/epoch (s)"]
    lines += [f"{name:<9} {secs:.3f}" for name, secs in table.items()]
    return "\n".join(lines) + "\n"


# --- report ---------------------------------------------------------------

@dataclass
class EvalReport:
    bits_per_dim: float
    nll_bound_nats: float
    n_mc: int
    frechet_proxy: float
    dims: int
    vae_bits_per_dim: float = float("nan")
    timing: dict = field(default_factory=dict)
    config_hash: str = ""

    def rows(self) -> list[tuple[str, str]]:
        rows = [
            ("bits_per_dim_upper_bound", f"{self.bits_per_dim:.6f}"),
            ("vae_bits_per_dim_upper_bound", f"{self.vae_bits_per_dim:.6f}"),
            ("nll_bound_nats", f"{self.nll_bound_nats:.6f}"),
            ("n_mc", str(self.n_mc)),
            ("dims", str(self.dims)),
            ("frechet_proxy_not_fid", f"{self.frechet_proxy:.6f}"),
        ]
        rows += [(f"seconds_per_epoch_{k}", f"{v:.4f}") for k, v in self.timing.items()]
        rows.append(("config_hash", self.config_hash))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"bits/dim (hybrid)     <= {self.bits_per_dim:.4f}",
            f"bits/dim (VAE alone)  <= {self.vae_bits_per_dim:.4f}",
            f"NLL bound (nats)      <= {self.nll_bound_nats:.3f}  (n_mc={self.n_mc}, D={self.dims})",
            f"{PROXY_LABEL}: {self.frechet_proxy:.4f}",
        ]
        lines += [f"time/epoch {k}: {v:.3f} s" for k, v in self.timing.items()]
        lines.append(f"config hash: {self.config_hash}")
        return "\n".join(lines) + "\n"

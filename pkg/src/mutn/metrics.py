"""Reconstruction quality metrics: MSE, PSNR, SSIM, and aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / mse); +inf for identical inputs."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / m)


def _gaussian_window(length: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(length) - length // 2
    w = np.exp(-(r**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1D window on each axis."""
    out = img
    k = win.size
    for axis in range(img.ndim):
        out = np.moveaxis(out, axis, -1)
        n = out.shape[-1]
        cols = np.stack([out[..., j:j + n - k + 1] for j in range(k)], axis=-1)
        out = cols @ win
        out = np.moveaxis(out, -1, axis)
    return out


def _ssim_single(a, b, peak, win):
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    s_aa = _filter_valid(a * a, win) - mu_a * mu_a
    s_bb = _filter_valid(b * b, win) - mu_b * mu_b
    s_ab = _filter_valid(a * b, win) - mu_a * mu_b
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean local SSIM (Gaussian window 11, sigma 1.5, K1=0.01, K2=0.03).

    1D signals use a length-11 1D window; (C, H, W) images are averaged
    over channels.  The local map is evaluated on the interior where the
    window fits entirely (no padding).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    min_dim = min(a.shape[-2:]) if a.ndim >= 2 else a.shape[-1]
    length = min(11, min_dim if min_dim % 2 == 1 else min_dim - 1)
    win = _gaussian_window(length=length)
    if a.ndim == 1:
        return _ssim_single(a, b, peak, win)
    if a.ndim == 2:
        return _ssim_single(a, b, peak, win)
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[c], b[c], peak, win)
                              for c in range(a.shape[0])]))
    raise ValueError(f"unsupported rank {a.ndim}")


@dataclass
class MetricsReport:
    """Per-sample metric rows plus their aggregates."""

    instance_ids: list = field(default_factory=list)
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    mse: list = field(default_factory=list)

    def add(self, instance_id, psnr_db, ssim, mse):
        self.instance_ids.append(instance_id)
        self.psnr_db.append(psnr_db)
        self.ssim.append(ssim)
        self.mse.append(mse)

    def aggregate(self):
        """Mean and standard deviation per metric (population std)."""
        out = {}
        for name, vals in (("psnr_db", self.psnr_db), ("ssim", self.ssim),
                           ("mse", self.mse)):
            arr = np.asarray(vals, dtype=np.float64)
            out[name] = (float(np.mean(arr)), float(np.std(arr)))
        return out

    def rows(self):
        return list(zip(self.instance_ids, self.psnr_db, self.ssim, self.mse))

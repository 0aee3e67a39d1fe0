"""Synthetic dataset generation for deconvolution, deblurring, and defogging.

Every sample is a (ground truth, measurement, approximate-model features)
triple where the measurement was produced by the *true* forward model plus
noise, while solvers only ever see the approximate features.  Generation is
bit-deterministic: sample i draws from its own `SeedSequence(seed,
spawn_key=(i,))` substream, so datasets are reproducible regardless of how
generation is parallelized.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import operators as ops


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian noise, std relative to the signal RMS."""

    sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


@dataclass
class SampleTriple:
    """One training/eval instance.

    ``true_features`` describe the exact forward model that produced ``y``;
    they exist for diagnostics only and must never reach a solver.
    """

    x: np.ndarray
    y: np.ndarray
    a0_features: np.ndarray
    true_features: np.ndarray


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def add_noise(y: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """y + sigma * RMS(y) * standard normal, deterministic per seed."""
    return _add_noise(y, spec.sigma, np.random.default_rng(spec.seed))


def _add_noise(y, sigma, rng):
    y = np.asarray(y, dtype=np.float64)
    if sigma == 0.0:
        return y.copy()
    rms = float(np.sqrt(np.mean(y * y)))
    return y + sigma * rms * rng.standard_normal(y.shape)


def kernel_psnr(k_true, k_approx) -> float:
    """10*log10(peak(k_true)^2 / MSE); +inf for identical kernels."""
    k_true = np.asarray(k_true, dtype=np.float64)
    k_approx = np.asarray(k_approx, dtype=np.float64)
    if k_true.shape != k_approx.shape:
        raise ValueError(f"shape mismatch: {k_true.shape} vs {k_approx.shape}")
    m = float(np.mean((k_true - k_approx) ** 2))
    if m == 0.0:
        return math.inf
    peak = float(np.max(k_true))
    return 10.0 * math.log10(peak * peak / m)


# ---------------------------------------------------------------------------
# seismic deconvolution


def gen_reflectivity(n: int, spike_prob: float = 0.08,
                     amplitude_std: float = 1.0, rng=None) -> np.ndarray:
    """Bernoulli(p)-Gaussian spike train of length n."""
    if not 0 < spike_prob < 1:
        raise ValueError(f"spike_prob must lie in (0,1), got {spike_prob}")
    if rng is None:
        rng = np.random.default_rng(0)
    mask = rng.uniform(size=n) < spike_prob
    amps = amplitude_std * rng.standard_normal(n)
    return np.where(mask, amps, 0.0)


def gen_seismic_dataset(count: int, n: int = 128,
                        f0_range=(20.0, 40.0), mismatch_delta: float = 0.1,
                        noise: NoiseSpec = NoiseSpec(),
                        spike_prob: float = 0.08, dt: float = 0.002,
                        wavelet_half_len: int = 25) -> list[SampleTriple]:
    """Sparse reflectivities convolved with a true wavelet; the stored
    features are a frequency-perturbed (inexact) wavelet.

    Per sample: f0 ~ U(f0_range); the measurement uses ricker(f0) while
    a0_features hold ricker(f0*(1+u)) with u ~ U(-delta, delta).
    """
    if mismatch_delta < 0:
        raise ValueError(f"mismatch_delta must be non-negative, got {mismatch_delta}")
    samples = []
    for i in range(count):
        rng = _sample_rng(noise.seed, i)
        x = gen_reflectivity(n, spike_prob=spike_prob, rng=rng)[None, :]
        f0 = rng.uniform(*f0_range)
        u = rng.uniform(-mismatch_delta, mismatch_delta) if mismatch_delta > 0 else 0.0
        w_true = ops.ricker_wavelet(f0, dt, wavelet_half_len)
        w_a0 = ops.ricker_wavelet(f0 * (1.0 + u), dt, wavelet_half_len)
        y = _add_noise(ops.toeplitz_operator(w_true, n)(x), noise.sigma, rng)
        samples.append(SampleTriple(x=x, y=y, a0_features=w_a0,
                                    true_features=w_true))
    return samples


# ---------------------------------------------------------------------------
# image synthesis shared by deblurring and defogging


def _smooth_field(rng, h: int, w: int, modes: int = 3) -> np.ndarray:
    """Random low-frequency cosine field normalized to [0, 1]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w),
                         indexing="ij")
    field = np.zeros((h, w))
    for _ in range(modes):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        field += rng.uniform(0.3, 1.0) * np.cos(
            2 * np.pi * (fy * yy + px * 0) + py) * np.cos(
            2 * np.pi * fx * xx + px)
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def synth_image(rng, h: int, w: int, n_rects: int = 3) -> np.ndarray:
    """3-channel test image in [0,1]: smooth field plus random rectangles."""
    img = np.stack([_smooth_field(rng, h, w) for _ in range(3)])
    for _ in range(n_rects):
        r0 = rng.integers(0, max(1, h - 2))
        c0 = rng.integers(0, max(1, w - 2))
        r1 = rng.integers(r0 + 1, h + 1)
        c1 = rng.integers(c0 + 1, w + 1)
        color = rng.uniform(0, 1, size=3)
        img[:, r0:r1, c0:c1] = color[:, None, None]
    return np.clip(img, 0.0, 1.0)


def load_image_folder(folder: str, hw) -> list[np.ndarray]:
    """Load .npy / common image files from a folder, center-cropped to hw.

    Arrays are converted to float64 (C, H, W) in [0, 1].
    """
    if not os.path.isdir(folder):
        raise OSError(f"not a readable image folder: {folder}")
    h, w = hw
    out = []
    for name in sorted(os.listdir(folder)):
        path = os.path.join(folder, name)
        if name.endswith(".npy"):
            arr = np.load(path)
        else:
            try:
                from PIL import Image
            except ImportError as exc:
                raise OSError(
                    f"cannot load {path}: install Pillow or provide .npy files"
                ) from exc
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
            arr = arr.transpose(2, 0, 1)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3)
        if arr.shape[1] < h or arr.shape[2] < w:
            continue
        r0 = (arr.shape[1] - h) // 2
        c0 = (arr.shape[2] - w) // 2
        out.append(np.clip(arr[:, r0:r0 + h, c0:c0 + w], 0.0, 1.0))
    if not out:
        raise OSError(f"no usable images of size >= {hw} in {folder}")
    return out


# ---------------------------------------------------------------------------
# deblurring


def gen_deblur_dataset(count: int, hw=(24, 24), image_source: str = "synthetic",
                       folder: str | None = None, true_size: int = 5,
                       true_sigma: float = 7.0, a0_sigma: float = 7.0,
                       noise: NoiseSpec = NoiseSpec()) -> list[SampleTriple]:
    """Images blurred by a Gaussian kernel (size 5, variance 7 by default);
    the stored features are a Gaussian kernel with variance ``a0_sigma``."""
    if image_source not in ("synthetic", "folder"):
        raise ValueError(f"unknown image_source {image_source!r}")
    pool = load_image_folder(folder, hw) if image_source == "folder" else None
    k_true = ops.gaussian_kernel2d(true_size, true_sigma)
    k_a0 = ops.gaussian_kernel2d(true_size, a0_sigma)
    samples = []
    for i in range(count):
        rng = _sample_rng(noise.seed, i)
        if pool is not None:
            x = pool[i % len(pool)]
        else:
            x = synth_image(rng, *hw)
        blur = ops.blur_operator(k_true, x.shape)
        y = _add_noise(blur(x), noise.sigma, rng)
        samples.append(SampleTriple(x=x, y=y, a0_features=k_a0.copy(),
                                    true_features=k_true.copy()))
    return samples


# ---------------------------------------------------------------------------
# defogging


def gen_fog_dataset(count: int, h: int = 24, w: int = 24,
                    beta_range=(0.5, 1.5), airlight_range=(0.7, 1.0),
                    noise: NoiseSpec = NoiseSpec()) -> list[SampleTriple]:
    """Haze composites x*T + L_air*(1-T) with T = exp(-beta * depth).

    Depth is a smooth random field normalized to [0,1]; the stored features
    are the depth map (the true transmission stays diagnostic-only).
    """
    if beta_range[0] <= 0:
        raise ValueError(f"beta must be positive, got range {beta_range}")
    samples = []
    for i in range(count):
        rng = _sample_rng(noise.seed, i)
        x = synth_image(rng, h, w)
        depth = _smooth_field(rng, h, w)
        beta = rng.uniform(*beta_range)
        T = np.broadcast_to(np.exp(-beta * depth), x.shape).copy()
        L_air = rng.uniform(*airlight_range, size=3)[:, None, None]
        L_air = np.broadcast_to(L_air, x.shape).copy()
        y = _add_noise(ops.fog_forward(x, T, L_air), noise.sigma, rng)
        samples.append(SampleTriple(x=x, y=y, a0_features=depth,
                                    true_features=T))
    return samples


def save_dataset(path, samples, metadata: dict = None) -> None:
    """Persist a list of sample triples to a tensor container."""
    from . import io as mio

    tensors = {}
    for i, s in enumerate(samples):
        tensors[f"sample.{i}.x"] = np.asarray(s.x, dtype=np.float64)
        tensors[f"sample.{i}.y"] = np.asarray(s.y, dtype=np.float64)
        tensors[f"sample.{i}.a0"] = np.asarray(s.a0_features, dtype=np.float64)
        tensors[f"sample.{i}.true"] = np.asarray(s.true_features,
                                                 dtype=np.float64)
    meta = {"data.count": len(samples)}
    if metadata:
        meta.update(metadata)
    mio.save_tensors(path, tensors, metadata=mio.format_config(meta))


def load_dataset(path):
    """Inverse of :func:`save_dataset`; returns (samples, metadata dict)."""
    from . import io as mio

    tensors, meta_text = mio.load_tensors(path)
    meta = mio.parse_config(meta_text)
    samples = [SampleTriple(x=tensors[f"sample.{i}.x"],
                            y=tensors[f"sample.{i}.y"],
                            a0_features=tensors[f"sample.{i}.a0"],
                            true_features=tensors[f"sample.{i}.true"])
               for i in range(int(meta["data.count"]))]
    return samples, meta

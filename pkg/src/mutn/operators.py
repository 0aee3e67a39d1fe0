"""Forward-model constructions.

Linear convolution operators built from 1D wavelets or 2D blur kernels,
the nonlinear fog degradation model, and the composite model
"base operator plus learned measurement residual".

Operators accept either plain numpy arrays or :class:`~mutn.diffcore.Var`
expression nodes; the return type matches the input, so the same
operator can be used for data generation and inside differentiated
solver updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Var


def _lift(fn: Callable[[Var], Var]):
    """Make a Var->Var function transparent for plain arrays."""

    def wrapped(x):
        if isinstance(x, Var):
            return fn(x)
        return fn(Var(x)).value

    return wrapped


@dataclass
class LinearOperator:
    """An operator with an explicit adjoint and a defining feature tensor.

    ``features`` is whatever parameterizes the operator (wavelet, blur
    kernel, depth map); solvers hand it to the mismatch network.
    """

    apply: Callable
    adjoint: Callable
    features: np.ndarray
    in_shape: tuple
    out_shape: tuple

    def __call__(self, x):
        return self.apply(x)


def ricker_wavelet(f0: float, dt: float, half_len: int) -> np.ndarray:
    """Symmetric Ricker wavelet with dominant frequency ``f0`` (Hz).

    w(t) = (1 - 2 pi^2 f0^2 t^2) exp(-pi^2 f0^2 t^2) sampled at t = k*dt
    for k in [-half_len, half_len].
    """
    if f0 <= 0 or dt <= 0:
        raise ValueError(f"f0 and dt must be positive, got f0={f0}, dt={dt}")
    t = np.arange(-half_len, half_len + 1) * dt
    a = (np.pi * f0 * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def gaussian_kernel2d(size: int, sigma: float) -> np.ndarray:
    """Normalized Gaussian kernel; ``sigma`` is the variance parameter."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = np.arange(size) - size // 2
    ii, jj = np.meshgrid(r, r, indexing="ij")
    k = np.exp(-(ii**2 + jj**2) / (2.0 * sigma))
    return k / np.sum(k)


def _conv_weight_1d(w, x_ndim):
    # plain (n,) signals use the kernel directly; channel-form signals
    # (..., 1, n) use a (1, 1, k) weight
    return w if x_ndim == 1 else w[None, None, :]


def toeplitz_operator(w: np.ndarray, n: int) -> LinearOperator:
    """Convolution by ``w`` on length-n signals, adjoint by reversed ``w``.

    Equivalent to multiplication by the banded Toeplitz matrix whose
    rows carry the (flipped) wavelet.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size % 2 == 0 or w.size > n:
        raise ValueError(f"wavelet must be 1D, odd length <= {n}, got shape {w.shape}")
    wr = w[::-1].copy()

    def apply(x):
        return dc.conv1d_same(x, _conv_weight_1d(w, x.value.ndim))

    def adjoint(y):
        return dc.conv1d_same(y, _conv_weight_1d(wr, y.value.ndim))

    return LinearOperator(apply=_lift(apply), adjoint=_lift(adjoint),
                          features=w, in_shape=(n,), out_shape=(n,))


def stacked_toeplitz_operator(ws: np.ndarray, n: int) -> LinearOperator:
    """Per-sample Toeplitz operators for a batch; ``ws`` has shape (B, k).

    Applies sample i's wavelet to channel-form signals (B, 1, n).
    """
    ws = np.asarray(ws, dtype=np.float64)
    wb = ws[:, None, None, :]

    def apply(x):
        return dc.conv1d_same(x, wb)

    def adjoint(y):
        return dc.conv1d_same(y, wb[..., ::-1].copy())

    return LinearOperator(apply=_lift(apply), adjoint=_lift(adjoint),
                          features=ws, in_shape=(ws.shape[0], 1, n),
                          out_shape=(ws.shape[0], 1, n))


def _diag_kernel(k: np.ndarray, channels: int) -> np.ndarray:
    w = np.zeros((channels, channels) + k.shape)
    for c in range(channels):
        w[c, c] = k
    return w


def blur_operator(k: np.ndarray, image_shape: tuple) -> LinearOperator:
    """Channel-wise 2D convolution by kernel ``k`` on (C, H, W) images."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k.shape}")
    channels = image_shape[0]
    w = _diag_kernel(k, channels)
    wr = _diag_kernel(k[::-1, ::-1].copy(), channels)

    def apply(x):
        return dc.conv2d_same(x, w)

    def adjoint(y):
        return dc.conv2d_same(y, wr)

    return LinearOperator(apply=_lift(apply), adjoint=_lift(adjoint),
                          features=k, in_shape=tuple(image_shape),
                          out_shape=tuple(image_shape))


def stacked_blur_operator(ks: np.ndarray, image_shape: tuple) -> LinearOperator:
    """Per-sample blur operators for a batch; ``ks`` has shape (B, k, k)."""
    ks = np.asarray(ks, dtype=np.float64)
    channels = image_shape[0]
    wb = np.stack([_diag_kernel(k, channels) for k in ks])
    wrb = np.stack([_diag_kernel(k[::-1, ::-1], channels) for k in ks])

    def apply(x):
        return dc.conv2d_same(x, wb)

    def adjoint(y):
        return dc.conv2d_same(y, wrb)

    return LinearOperator(apply=_lift(apply), adjoint=_lift(adjoint),
                          features=ks, in_shape=(ks.shape[0],) + tuple(image_shape),
                          out_shape=(ks.shape[0],) + tuple(image_shape))


def identity_operator(shape: tuple, features: np.ndarray) -> LinearOperator:
    """Identity map; the initial model for the defogging task."""

    def apply(x):
        return dc.add(x, 0.0)

    return LinearOperator(apply=_lift(apply), adjoint=_lift(apply),
                          features=np.asarray(features, dtype=np.float64),
                          in_shape=tuple(shape), out_shape=tuple(shape))


def fog_approx_operator(depth: np.ndarray, beta0: float, l_air0: float,
                        image_shape: tuple) -> LinearOperator:
    """Approximate haze model built from the depth features alone.

    Uses a nominal attenuation T0 = exp(-beta0 * depth) and a constant
    airlight level, giving the affine map x -> x*T0 + l_air0*(1 - T0).
    The adjoint is that of the linear part (multiplication by T0).
    """
    depth = np.asarray(depth, dtype=np.float64)
    if beta0 <= 0:
        raise ValueError(f"beta0 must be positive, got {beta0}")
    c = image_shape[0]
    t_small = np.exp(-beta0 * depth)
    if depth.ndim == 2:
        T0 = np.broadcast_to(t_small, (c,) + t_small.shape).copy()
    else:  # (B, H, W) per-sample depths
        T0 = np.broadcast_to(t_small[:, None, :, :],
                             (depth.shape[0], c) + depth.shape[1:]).copy()
    offset = l_air0 * (1.0 - T0)

    def apply(x):
        return dc.add(dc.mul(x, Var(T0)), Var(offset))

    def adjoint(y):
        return dc.mul(y, Var(T0))

    return LinearOperator(apply=_lift(apply), adjoint=_lift(adjoint),
                          features=depth, in_shape=tuple(image_shape),
                          out_shape=tuple(image_shape))


def fog_forward(x: np.ndarray, T: np.ndarray, L_air: np.ndarray) -> np.ndarray:
    """Atmospheric degradation: x*T + L_air*(1 - T), all elementwise."""
    x = np.asarray(x, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    L_air = np.asarray(L_air, dtype=np.float64)
    if T.shape != x.shape or L_air.shape != x.shape:
        raise ValueError(
            f"shape mismatch: x {x.shape}, T {T.shape}, L_air {L_air.shape}"
        )
    if np.any(T < 0.0) or np.any(T > 1.0):
        raise ValueError("transmission map entries must lie in [0, 1]")
    return x * T + L_air * (1.0 - T)


@dataclass
class CompositeForwardModel:
    """Base operator plus the learned measurement residual.

    prediction(x) = base(x) + mismatch(x, base.features)
    """

    base: LinearOperator
    mismatch: Callable  # (x_or_base_out context) -> residual; see composite_predict
    mismatch_spec: object = None
    theta: list = field(default_factory=list)


def composite_predict(model: CompositeForwardModel, x):
    """Predict measurements with the mismatch-corrected model."""
    base_out = model.base(x)
    residual = model.mismatch(x, base_out, model.base.features)
    if isinstance(base_out, Var) or isinstance(residual, Var):
        out = dc.add(dc.as_var(base_out), dc.as_var(residual))
        return out if isinstance(x, Var) else out.value
    if residual.shape != base_out.shape:
        raise ValueError(
            f"residual shape {residual.shape} does not match base output "
            f"shape {base_out.shape}"
        )
    return base_out + residual

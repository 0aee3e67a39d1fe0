"""Learnable components: proximal network, mismatch residual network.

Both are plain conv + leaky-relu stacks without biases or normalization.  The
proximal network is a residual denoiser (input added back to the body
output); the mismatch network maps the concatenation of the base model
prediction and a feature plane to a measurement-space residual.

Weights live as lists of numpy arrays; callers that need gradients wrap
them into :class:`~mutn.diffcore.Var` leaves and pass those in instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Var


@dataclass(frozen=True)
class ConvNetSpec:
    """Architecture of a small CNN.

    ``ndim`` is 1 for signals (C, n) and 2 for images (C, H, W).
    Hidden layers use leaky relu; the final layer is linear.
    """

    ndim: int
    in_channels: int
    hidden_channels: int
    out_channels: int
    depth: int
    kernel_size: int = 5
    residual: bool = False
    # constant multiplier on the body output (residual-branch scaling).
    # A small value keeps a freshly initialized branch from dominating the
    # signal path while leaving the expressible function class unchanged:
    # fitted weights simply grow by the inverse factor.
    out_scale: float = 1.0

    def layer_shapes(self):
        k = (self.kernel_size,) * self.ndim
        if self.depth == 1:
            return [(self.out_channels, self.in_channels) + k]
        shapes = [(self.hidden_channels, self.in_channels) + k]
        for _ in range(self.depth - 2):
            shapes.append((self.hidden_channels, self.hidden_channels) + k)
        shapes.append((self.out_channels, self.hidden_channels) + k)
        return shapes


SCHEMES = ("kaiming-uniform", "xavier")


def init_params(spec: ConvNetSpec, scheme: str = "kaiming-uniform",
                seed: int = 0) -> list:
    """Draw a weight set for ``spec``.

    kaiming-uniform: U(+-sqrt(6/fan_in)); xavier: U(+-sqrt(6/(fan_in+fan_out))).
    Each layer uses its own substream of ``seed``, so (spec, scheme, seed)
    determines the weights exactly.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    weights = []
    recep = spec.kernel_size ** spec.ndim
    for i, shape in enumerate(spec.layer_shapes()):
        fan_in = shape[1] * recep
        fan_out = shape[0] * recep
        if scheme == "kaiming-uniform":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        weights.append(rng.uniform(-bound, bound, size=shape))
    return weights


def zero_params(spec: ConvNetSpec) -> list:
    return [np.zeros(s) for s in spec.layer_shapes()]


def _conv(spec, x, w):
    return dc.conv1d_same(x, w) if spec.ndim == 1 else dc.conv2d_same(x, w)


def _body(spec: ConvNetSpec, weights, x: Var) -> Var:
    h = x
    for i, w in enumerate(weights):
        h = _conv(spec, h, dc.as_var(w))
        if i < len(weights) - 1:
            # leaky activations keep gradients alive everywhere; with a
            # hard relu the per-instance mismatch descent can fall into a
            # fully dead (zero-output, zero-gradient) configuration and
            # never recover
            h = dc.leaky_relu(h)
    return h


def net_forward(spec: ConvNetSpec, weights, x):
    """Forward pass; adds the residual skip when the spec asks for one."""
    is_var = isinstance(x, Var)
    xv = dc.as_var(x)
    out = _body(spec, weights, xv)
    if spec.out_scale != 1.0:
        out = dc.mul(out, spec.out_scale)
    if spec.residual:
        out = dc.add(xv, out)
    return out if is_var or any(isinstance(w, Var) for w in weights) else out.value


def prox_forward(spec: ConvNetSpec, rho, v):
    """Learned proximal step: v + body(v).  Shape preserving."""
    if not spec.residual:
        raise ValueError("proximal network spec must have residual=True")
    return net_forward(spec, rho, v)


def feature_plane(features: np.ndarray, grid_shape: tuple) -> np.ndarray:
    """Tile a feature tensor into one channel plane of ``grid_shape``.

    A feature already matching the grid is used as is; anything else is
    flattened and repeated periodically, which puts the same local
    pattern in reach of every convolution window.
    """
    features = np.asarray(features, dtype=np.float64)
    grid = tuple(grid_shape)
    if features.shape == grid:
        return features.copy()
    flat = features.ravel()
    size = int(np.prod(grid))
    reps = -(-size // flat.size)
    return np.tile(flat, reps)[:size].reshape(grid)


def mismatch_input(base_out, features, ndim: int):
    """Concatenate the base prediction with a tiled feature plane.

    ``ndim`` is the spatial rank (1 or 2); the channel axis sits just
    before the spatial axes.  With a leading batch axis the features may
    carry a matching per-sample leading dimension.
    """
    is_var = isinstance(base_out, Var)
    bv = dc.as_var(base_out)
    shape = bv.value.shape
    grid = shape[-ndim:]
    lead = shape[: len(shape) - ndim - 1]
    features = np.asarray(features, dtype=np.float64)
    if lead and features.ndim >= 1 and features.shape[0] == lead[-1] and features.shape != grid:
        planes = np.stack([feature_plane(f, grid) for f in features])
        plane_full = np.broadcast_to(
            planes.reshape(lead + (1,) + grid), lead + (1,) + grid
        ).copy()
    else:
        plane = feature_plane(features, grid)
        plane_full = np.broadcast_to(plane, lead + (1,) + grid).copy()
    axis = len(shape) - ndim - 1
    out = dc.concat_channels([bv, Var(plane_full)], axis=axis)
    return out if is_var else out.value


def mismatch_forward(spec: ConvNetSpec, theta, base_out, features):
    """Residual prediction from the base output and operator features."""
    is_var = isinstance(base_out, Var) or any(isinstance(w, Var) for w in theta)
    inp = mismatch_input(dc.as_var(base_out), features, spec.ndim)
    out = net_forward(spec, theta, inp)
    out = dc.as_var(out)
    return out if is_var else out.value

"""Dense tensor expressions with reverse-mode differentiation.

Values are plain numpy arrays (row-major, float64 by default).  A
:class:`Var` wraps an array into a dynamically built expression graph;
every primitive records a vector-Jacobian rule so that :func:`grad` can
differentiate any scalar-valued expression with respect to a chosen set
of parameter leaves.  Graphs are built per solver iteration, consumed by
one backward pass and then discarded.

Broadcasting is restricted to scalar-with-tensor; any other shape
combination raises :class:`ShapeMismatchError` naming the primitive.

Convolutions follow the true-convolution convention: the kernel is
flipped, aligned at its center sample and the signal is zero padded, so
the adjoint of convolving with ``w`` is convolving with ``w`` reversed.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "ShapeMismatchError",
    "NonScalarObjectiveError",
    "as_var",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv1d_same",
    "conv2d_same",
    "relu",
    "leaky_relu",
    "sum_all",
    "mean_all",
    "sq_norm",
    "concat_channels",
    "take_slice",
    "grad",
]


class ShapeMismatchError(ValueError):
    """Incompatible operand shapes for a primitive."""

    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        super().__init__(
            f"{primitive}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        )


class NonScalarObjectiveError(ValueError):
    """grad() called on an expression that is not scalar valued."""


class Var:
    """A node in the expression graph.

    ``value`` is the forward result, ``_parents`` a list of
    ``(parent, vjp)`` pairs where ``vjp`` maps the upstream gradient to
    this parent's gradient contribution.
    """

    __slots__ = ("value", "requires_grad", "_parents")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = ()

    @property
    def shape(self):
        return self.value.shape

    # convenience operators; scalars are allowed on either side
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _make(value, parents):
    out = Var(value)
    out._parents = tuple(parents)
    return out


def _is_scalar_shape(shape):
    return shape == () or shape == (1,)


def _check_elementwise(primitive, a, b):
    if a.shape != b.shape and not (_is_scalar_shape(a.shape) or _is_scalar_shape(b.shape)):
        raise ShapeMismatchError(primitive, a.shape, b.shape)


def _reduce_to(g, shape):
    # collapse the gradient of a scalar operand that was broadcast
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b):
    a, b = as_var(a), as_var(b)
    _check_elementwise("add", a.value, b.value)
    val = a.value + b.value
    return _make(val, [(a, lambda g: _reduce_to(g, a.value.shape)),
                       (b, lambda g: _reduce_to(g, b.value.shape))])


def sub(a, b):
    a, b = as_var(a), as_var(b)
    _check_elementwise("subtract", a.value, b.value)
    val = a.value - b.value
    return _make(val, [(a, lambda g: _reduce_to(g, a.value.shape)),
                       (b, lambda g: _reduce_to(-g, b.value.shape))])


def mul(a, b):
    """Elementwise product; one operand may be a scalar."""
    a, b = as_var(a), as_var(b)
    _check_elementwise("multiply", a.value, b.value)
    av, bv = a.value, b.value
    return _make(av * bv, [(a, lambda g: _reduce_to(g * bv, av.shape)),
                           (b, lambda g: _reduce_to(g * av, bv.shape))])


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0 if bv.ndim <= 2 else -2]:
        raise ShapeMismatchError("matmul", av.shape, bv.shape)
    val = av @ bv

    def vjp_a(g):
        if bv.ndim == 1:
            return np.outer(g, bv) if av.ndim == 2 else g * bv
        return g @ bv.swapaxes(-1, -2)

    def vjp_b(g):
        if av.ndim == 1:
            return np.outer(av, g) if bv.ndim == 2 else g * av
        return av.swapaxes(-1, -2) @ g

    return _make(val, [(a, vjp_a), (b, vjp_b)])


# ---------------------------------------------------------------------------
# convolution primitives


def _conv_shape_check(primitive, x, w, ndim):
    k = w.shape[-1]
    if k % 2 == 0:
        raise ShapeMismatchError(primitive, x.shape, w.shape)
    if ndim == 1:
        if w.ndim == 1:
            ok = x.ndim == 1 and k <= x.shape[-1]
        elif w.ndim == 3:
            ok = x.ndim in (2, 3) and x.shape[-2] == w.shape[1] and k <= x.shape[-1]
        elif w.ndim == 4:
            # per-sample kernel stack: w (B, Co, Ci, k), x (B, Ci, n)
            ok = (x.ndim == 3 and w.shape[0] == x.shape[0]
                  and x.shape[-2] == w.shape[2] and k <= x.shape[-1])
        else:
            ok = False
    else:
        if w.ndim == 2:
            ok = x.ndim == 2 and w.shape[0] == w.shape[1] == k and k <= min(x.shape)
        elif w.ndim == 4:
            ok = (x.ndim in (3, 4) and x.shape[-3] == w.shape[1]
                  and w.shape[-2] == k and k <= min(x.shape[-2:]))
        elif w.ndim == 5:
            ok = (x.ndim == 4 and w.shape[0] == x.shape[0]
                  and x.shape[-3] == w.shape[2]
                  and w.shape[-2] == k and k <= min(x.shape[-2:]))
        else:
            ok = False
    if not ok:
        raise ShapeMismatchError(primitive, x.shape, w.shape)


def _conv1d_channel_fwd(x, w):
    """x: (..., Ci, n); w: (Co, Ci, k) or (B, Co, Ci, k).  True convolution."""
    n = x.shape[-1]
    k = w.shape[-1]
    c = k // 2
    co, ci = w.shape[-3], w.shape[-2]
    pad = [(0, 0)] * (x.ndim - 1) + [(c, c)]
    xp = np.pad(x, pad)
    # (..., Ci, k, n): window j holds x shifted by j
    cols = np.lib.stride_tricks.sliding_window_view(xp, n, axis=-1)
    cols2 = np.ascontiguousarray(cols).reshape(x.shape[:-2] + (ci * k, n))
    fw = w[..., ::-1].reshape(w.shape[:-3] + (co, ci * k))
    y = np.matmul(fw, cols2)
    return y, cols2, fw


def _conv1d_channel_bwd_x(g, fw, x_shape, k):
    n = x_shape[-1]
    c = k // 2
    ci = x_shape[-2]
    gc = np.matmul(fw.swapaxes(-1, -2), g)  # (..., Ci*k, n)
    gc = gc.reshape(x_shape[:-2] + (ci, k, n))
    gxp = np.zeros(x_shape[:-1] + (n + 2 * c,))
    for j in range(k):
        gxp[..., j:j + n] += gc[..., j, :]
    return gxp[..., c:c + n]


def _conv1d_channel_bwd_w(g, cols2, w_shape):
    # g: (..., Co, n); cols2: (..., Ci*k, n)
    if len(w_shape) == 4:  # per-sample kernels: no reduction over batch
        gfw = np.matmul(g, cols2.swapaxes(-1, -2))
    else:
        n = g.shape[-1]
        gb = g.reshape(-1, g.shape[-2], n)
        cb = cols2.reshape(-1, cols2.shape[-2], n)
        gfw = np.einsum("bon,bmn->om", gb, cb)
    return gfw.reshape(w_shape)[..., ::-1].copy()


def conv1d_same(x, w):
    """Center-aligned true convolution with zero padding.

    Accepted shapes: plain ``x (n,), w (k,)``; channel form
    ``x (..., Ci, n), w (Co, Ci, k)``; per-sample kernels
    ``x (B, Ci, n), w (B, Co, Ci, k)``.  Kernel length must be odd and
    no longer than the signal.
    """
    x, w = as_var(x), as_var(w)
    _conv_shape_check("conv1d_same", x.value, w.value, ndim=1)
    plain = w.value.ndim == 1
    xv = x.value[None, :] if plain else x.value
    wv = w.value[None, None, :] if plain else w.value
    y, cols2, fw = _conv1d_channel_fwd(xv, wv)
    val = y[0] if plain else y
    x_shape, w_shape, k = xv.shape, wv.shape, wv.shape[-1]

    def vjp_x(g):
        gv = g[None, :] if plain else g
        gx = _conv1d_channel_bwd_x(gv, fw, x_shape, k)
        return gx[0] if plain else gx

    def vjp_w(g):
        gv = g[None, :] if plain else g
        gw = _conv1d_channel_bwd_w(gv, cols2, w_shape)
        return gw[0, 0] if plain else gw

    return _make(val, [(x, vjp_x), (w, vjp_w)])


def _conv2d_channel_fwd(x, w):
    """x: (..., Ci, H, W); w: (Co, Ci, k, k) or (B, Co, Ci, k, k)."""
    h, wd = x.shape[-2:]
    k = w.shape[-1]
    c = k // 2
    co, ci = w.shape[-4], w.shape[-3]
    pad = [(0, 0)] * (x.ndim - 2) + [(c, c), (c, c)]
    xp = np.pad(x, pad)
    # (..., Ci, k, k, H, W): window (p, q) holds x shifted by (p, q)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (h, wd), axis=(-2, -1))
    cols2 = np.ascontiguousarray(cols).reshape(x.shape[:-3] + (ci * k * k, h * wd))
    fw = w[..., ::-1, ::-1].reshape(w.shape[:-4] + (co, ci * k * k))
    y = np.matmul(fw, cols2).reshape(x.shape[:-3] + (co, h, wd))
    return y, cols2, fw


def conv2d_same(x, w):
    """2D analog of :func:`conv1d_same` (square odd kernels)."""
    x, w = as_var(x), as_var(w)
    _conv_shape_check("conv2d_same", x.value, w.value, ndim=2)
    plain = w.value.ndim == 2
    xv = x.value[None, :, :] if plain else x.value
    wv = w.value[None, None, :, :] if plain else w.value
    y, cols2, fw = _conv2d_channel_fwd(xv, wv)
    val = y[0] if plain else y
    x_shape, w_shape, k = xv.shape, wv.shape, wv.shape[-1]
    h, wd = x_shape[-2:]
    c = k // 2
    ci = x_shape[-3]

    def vjp_x(g):
        gv = g[None, :, :] if plain else g
        gflat = gv.reshape(x_shape[:-3] + (w_shape[-4], h * wd))
        gc = np.matmul(fw.swapaxes(-1, -2), gflat)
        gc = gc.reshape(x_shape[:-3] + (ci, k * k, h, wd))
        gxp = np.zeros(x_shape[:-2] + (h + 2 * c, wd + 2 * c))
        for p in range(k):
            for q in range(k):
                gxp[..., p:p + h, q:q + wd] += gc[..., p * k + q, :, :]
        gx = gxp[..., c:c + h, c:c + wd]
        return gx[0] if plain else gx

    def vjp_w(g):
        gv = g[None, :, :] if plain else g
        gflat = gv.reshape(x_shape[:-3] + (w_shape[-4], h * wd))
        if len(w_shape) == 5:
            gfw = np.matmul(gflat, cols2.swapaxes(-1, -2))
        else:
            m = gflat.shape[-1]
            gb = gflat.reshape(-1, gflat.shape[-2], m)
            cb = cols2.reshape(-1, cols2.shape[-2], m)
            gfw = np.einsum("bom,bnm->on", gb, cb)
        gw = gfw.reshape(w_shape)[..., ::-1, ::-1].copy()
        return gw[0, 0] if plain else gw

    return _make(val, [(x, vjp_x), (w, vjp_w)])


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def relu(x):
    x = as_var(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), [(x, lambda g: g * mask)])


def leaky_relu(x, alpha=0.2):
    x = as_var(x)
    mask = x.value > 0
    slope = np.where(mask, 1.0, alpha)
    return _make(x.value * slope, [(x, lambda g: g * slope)])


def sum_all(x):
    x = as_var(x)
    shape = x.value.shape
    return _make(np.sum(x.value), [(x, lambda g: np.broadcast_to(g, shape).copy())])


def mean_all(x):
    x = as_var(x)
    shape = x.value.shape
    n = x.value.size
    return _make(np.mean(x.value),
                 [(x, lambda g: np.broadcast_to(g / n, shape).copy())])


def sq_norm(x):
    """Squared l2 norm over all entries."""
    x = as_var(x)
    xv = x.value
    return _make(np.sum(xv * xv), [(x, lambda g: 2.0 * g * xv)])


def concat_channels(parts, axis):
    """Concatenate along a channel axis; all other dims must agree."""
    parts = [as_var(p) for p in parts]
    shapes = [p.value.shape for p in parts]
    ref = list(shapes[0])
    ax = axis % len(ref)
    for s in shapes[1:]:
        other = list(s)
        if len(other) != len(ref) or other[:ax] != ref[:ax] or other[ax + 1:] != ref[ax + 1:]:
            raise ShapeMismatchError("concat_channels", *shapes)
    val = np.concatenate([p.value for p in parts], axis=ax)
    sizes = [s[ax] for s in shapes]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            idx = [slice(None)] * len(ref)
            idx[ax] = slice(lo, hi)
            return g[tuple(idx)]

        parents.append((p, vjp))
    return _make(val, parents)


def take_slice(x, axis, start, stop):
    x = as_var(x)
    nd = x.value.ndim
    ax = axis % nd
    idx = [slice(None)] * nd
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[idx] = g
        return out

    return _make(x.value[idx].copy(), [(x, vjp)])


# ---------------------------------------------------------------------------
# reverse pass


def _topo(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(expr, params):
    """Gradient of a scalar expression for each Var in ``params``.

    Returns a dict keyed by the parameter Vars; each gradient has the
    parameter's shape.  Parameters not reached by the graph get zeros.
    """
    expr = as_var(expr)
    if expr.value.shape != ():
        raise NonScalarObjectiveError(
            f"objective must be scalar, got shape {expr.value.shape}"
        )
    grads = {id(expr): np.ones(())}
    order = _topo(expr)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._parents:
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib
    return {p: grads.get(id(p), np.zeros(p.value.shape)) for p in params}

"""Optimization engines.

Classical proximal gradient, the split objective J and its alternating
updates (auxiliary variable z, per-instance mismatch weights theta,
reconstruction x), the adaptive loop-unrolled solver, baseline solvers,
a generic Anderson-accelerated fixed-point solver and the equilibrium
variant with a one-step backward pass.

Solvers operate on channel-form arrays: (C, n) / (B, C, n) for signals,
(C, H, W) / (B, C, H, W) for images.  A solver instance is strictly
sequential; instances never share mutable state (theta is cloned per
instance).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import networks as nets
from .diffcore import Var


class NumericalAbortError(RuntimeError):
    """An update produced a non-finite value."""


@dataclass
class LUConfig:
    """Unrolled-solver configuration.

    ``inner_lr_*`` are the gradient-descent rates of the z and theta
    inner updates; ``backtracking`` halves an inner step until the
    objective stops increasing (classical mode only).
    """

    K: int = 5
    lam: float = 0.01
    tau: float = 0.1
    gamma: float = 0.0
    r_mode: str = "none"  # none | l1 | l2
    inner_steps_z: int = 1
    inner_steps_theta: int = 1
    inner_lr_z: float = 1e-4
    inner_lr_theta: float = 1e-4
    backtracking: bool = False
    # skip the theta update for this many leading outer rounds; early
    # iterates are dominated by reconstruction error rather than model
    # error, and fitting theta against them teaches it the wrong residual
    theta_warmup: int = 0

    def __post_init__(self):
        if self.K < 0 or self.lam < 0 or self.tau < 0:
            raise ValueError("K, lam, tau must be non-negative")
        if self.theta_warmup < 0:
            raise ValueError("theta_warmup must be non-negative")
        if self.inner_lr_z <= 0 or self.inner_lr_theta <= 0:
            raise ValueError("inner learning rates must be positive")
        if self.r_mode not in ("none", "l1", "l2"):
            raise ValueError(f"unknown r_mode {self.r_mode!r}")


@dataclass
class DEQConfig:
    """Fixed-point solver configuration (Anderson mixing over x)."""

    max_iter: int = 30
    anderson_m: int = 5
    beta: float = 1.0
    ridge: float = 1e-10
    tol: float = 1e-4  # relative fixed-point residual
    lu: LUConfig = field(default_factory=LUConfig)

    def __post_init__(self):
        if self.anderson_m < 1 or self.tol <= 0 or self.max_iter < 1:
            raise ValueError("anderson_m >= 1, tol > 0 and max_iter >= 1 required")


@dataclass
class SolverTrace:
    """Per-iteration record: x snapshots, objective J, residuals, MSE."""

    x_snapshots: list = field(default_factory=list)
    J: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    fp_residual: list = field(default_factory=list)
    converged: bool = True
    aux: dict = field(default_factory=dict)

    def record(self, x, J=None, mse=None, fp_residual=None, keep_x=True):
        if keep_x:
            self.x_snapshots.append(np.array(x, copy=True))
        if J is not None:
            self.J.append(float(J))
        if mse is not None:
            self.mse.append(float(mse))
        if fp_residual is not None:
            self.fp_residual.append(float(fp_residual))


# ---------------------------------------------------------------------------
# classical pieces


def prox_l1(v, t):
    """Soft threshold at level t."""
    if t < 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    if isinstance(v, Var):
        v = v.value
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def prox_l2(v, t):
    """Shrinkage v / (1 + 2t)."""
    if t < 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    if isinstance(v, Var):
        v = v.value
    return np.asarray(v, dtype=np.float64) / (1.0 + 2.0 * t)


def _r_term(x, cfg: LUConfig) -> float:
    if cfg.r_mode == "l1":
        return cfg.gamma * float(np.sum(np.abs(x)))
    if cfg.r_mode == "l2":
        return cfg.gamma * float(np.sum(x * x))
    return 0.0


def classical_prox(cfg: LUConfig):
    """The x-step prox for classical mode, threshold gamma/(2*lam).

    The returned callable accepts arrays or Vars (Vars are unwrapped;
    classical proxes never sit on a training tape).
    """
    t = cfg.gamma / (2.0 * cfg.lam) if cfg.lam > 0 else cfg.gamma

    def unwrap(v):
        return v.value if isinstance(v, Var) else np.asarray(v, dtype=np.float64)

    if cfg.r_mode == "l1":
        return lambda v: prox_l1(unwrap(v), t)
    if cfg.r_mode == "l2":
        return lambda v: prox_l2(unwrap(v), t)
    return lambda v: unwrap(v)


def prox_grad_step(x, y, A, eta, prox):
    """One proximal gradient iteration: prox(x + eta * A^T (y - A x)).

    Works on plain arrays or Vars (with eta a Var and prox building
    graph nodes) so it can sit on the training tape.
    """
    tape = isinstance(x, Var) or isinstance(eta, Var)
    xv = dc.as_var(x)
    r = dc.sub(dc.as_var(y), A(xv))
    step = dc.add(xv, dc.mul(dc.as_var(eta), A.adjoint(r)))
    out = prox(step)
    if tape:
        return dc.as_var(out)
    return out.value if isinstance(out, Var) else out


# ---------------------------------------------------------------------------
# the split objective and its alternating updates


def _data_terms(z_var, theta, y, a0, mm_spec, tau):
    """1/2 ||y - A0(z) - f(z)||^2 + tau ||f(z)||^2 as a Var."""
    pred = a0(z_var)
    f = nets.mismatch_forward(mm_spec, theta, pred, a0.features)
    resid = dc.sub(dc.sub(dc.as_var(y), pred), f)
    return dc.add(dc.mul(dc.sq_norm(resid), 0.5),
                  dc.mul(dc.sq_norm(f), tau)), f


def objective_J(z, theta, x, y, a0, mm_spec, cfg: LUConfig) -> float:
    """J(z, theta, x) of the split problem.

    1/2||y - A0(z) - f_theta(z)||^2 + gamma*r(x) + tau||f_theta(z)||^2
    + lam||x - z||^2.  In learned-prox runs (r_mode 'none') the r term
    is omitted from the reported value.
    """
    data, _ = _data_terms(Var(z), theta, y, a0, mm_spec, cfg.tau)
    coupling = cfg.lam * float(np.sum((np.asarray(x) - np.asarray(z)) ** 2))
    return float(data.value) + _r_term(x, cfg) + coupling


def _descent_steps(z0, objective_and_grad, steps, lr, backtracking, what,
                   step_state=None):
    """Generic inner loop: gradient descent with optional halving.

    ``step_state`` is an optional dict carrying the last accepted step
    size under key ``what`` across calls, so backtracking does not have
    to re-shrink from ``lr`` every time.
    """
    z = np.array(z0, copy=True)
    for _ in range(steps):
        val, g = objective_and_grad(z)
        if not np.all(np.isfinite(g)):
            raise NumericalAbortError(f"non-finite gradient in {what} update")
        t = lr
        if backtracking and step_state is not None:
            t = min(lr, 2.0 * step_state.get(what, lr))
        znew = z - t * g
        if backtracking:
            for _ in range(60):
                newval, _ = objective_and_grad(znew)
                if newval <= val + 1e-12 * (1.0 + abs(val)):
                    break
                t *= 0.5
                znew = z - t * g
            else:
                znew = z  # no admissible step found
            if step_state is not None:
                step_state[what] = t
        z = znew
        if not np.all(np.isfinite(z)):
            raise NumericalAbortError(f"non-finite iterate in {what} update")
    return z


def z_update(z, x, theta, y, a0, mm_spec, cfg: LUConfig, step_state=None):
    """Inner gradient descent on the z block of J (theta, x fixed)."""

    def oag(zc):
        zv = Var(zc, requires_grad=True)
        data, _ = _data_terms(zv, theta, y, a0, mm_spec, cfg.tau)
        obj = dc.add(data, dc.mul(dc.sq_norm(dc.sub(dc.as_var(x), zv)), cfg.lam))
        g = dc.grad(obj, [zv])[zv]
        return float(obj.value), g

    return _descent_steps(z, oag, cfg.inner_steps_z, cfg.inner_lr_z,
                          cfg.backtracking, "z", step_state=step_state)


def _theta_exact_linear(theta, z, y, a0, mm_spec, cfg: LUConfig):
    """Exact theta block step for a single-layer (linear) mismatch net.

    With depth 1 the residual f is linear in the weights, so the theta
    block of J is ridge least squares in closed form; alternating
    minimization takes the exact block minimizer, which both decreases J
    at least as much as any gradient step and makes the update
    independent of the incoming theta.
    """
    zc = np.asarray(z)
    pred = a0(zc)
    pred = pred.value if isinstance(pred, Var) else pred
    inp = nets.mismatch_input(pred, a0.features, mm_spec.ndim)
    w_shape = theta[0].shape  # (out_c, in_c, k[, k])
    out_c = w_shape[0]
    m = int(np.prod(w_shape[1:]))
    basis = np.eye(m).reshape((m,) + w_shape[1:])
    conv = dc.conv1d_same if mm_spec.ndim == 1 else dc.conv2d_same
    cols = conv(inp, basis)
    cols = cols.value if isinstance(cols, Var) else cols
    # rows = all batch/spatial positions, columns = the m weights
    X = np.moveaxis(cols, -mm_spec.ndim - 1, -1).reshape(-1, m)
    if mm_spec.out_scale != 1.0:
        X = X * mm_spec.out_scale
    r = np.asarray(y, dtype=np.float64) - pred
    R = np.moveaxis(r, -mm_spec.ndim - 1, -1).reshape(-1, out_c)
    G = (1.0 + 2.0 * cfg.tau) * (X.T @ X)
    G += (1e-10 * (np.trace(G) / m + 1.0)) * np.eye(m)
    try:
        W = np.linalg.solve(G, X.T @ R)
    except np.linalg.LinAlgError:
        W = np.linalg.lstsq(G, X.T @ R, rcond=None)[0]
    if not np.all(np.isfinite(W)):
        raise NumericalAbortError("non-finite solution in theta update")
    return [W.T.reshape((out_c,) + w_shape[1:])]


def theta_update(theta, z, y, a0, mm_spec, cfg: LUConfig, step_state=None):
    """Inner update of the theta block of J (z fixed).

    Single-layer mismatch nets take the exact block minimizer; deeper
    nets take ``inner_steps_theta`` gradient steps.
    """
    if cfg.inner_steps_theta == 0:
        return [t.copy() for t in theta]
    if mm_spec.depth == 1 and len(theta) == 1:
        return _theta_exact_linear(theta, z, y, a0, mm_spec, cfg)
    shapes = [t.shape for t in theta]
    sizes = [t.size for t in theta]

    def pack(ts):
        return np.concatenate([t.ravel() for t in ts])

    def unpack(v):
        out = []
        pos = 0
        for sh, sz in zip(shapes, sizes):
            out.append(v[pos:pos + sz].reshape(sh))
            pos += sz
        return out

    def oag(tc):
        tvars = [Var(t, requires_grad=True) for t in unpack(tc)]
        data, _ = _data_terms(Var(np.asarray(z)), tvars, y, a0, mm_spec, cfg.tau)
        grads = dc.grad(data, tvars)
        return float(data.value), pack([grads[t] for t in tvars])

    packed = _descent_steps(pack(theta), oag, cfg.inner_steps_theta,
                            cfg.inner_lr_theta, cfg.backtracking, "theta",
                            step_state=step_state)
    return unpack(packed)


def x_update(x, z, eta, prox):
    """prox(x - eta * (x - z)); tape-transparent like prox_grad_step."""
    tape = isinstance(x, Var) or isinstance(eta, Var)
    xv = dc.as_var(x)
    v = dc.sub(xv, dc.mul(dc.as_var(eta), dc.sub(xv, dc.as_var(z))))
    out = prox(v)
    if tape:
        return dc.as_var(out)
    return out.value if isinstance(out, Var) else out


# ---------------------------------------------------------------------------
# solver forwards


def init_x0(y, a0):
    """A0^T y when x and y live in different spaces, else y itself."""
    y = np.asarray(y, dtype=np.float64)
    if tuple(a0.in_shape) != tuple(a0.out_shape):
        return a0.adjoint(y)
    return y.copy()


def _mse_vs(x, truth):
    if truth is None:
        return None
    return float(np.mean((np.asarray(x) - np.asarray(truth)) ** 2))


def _clone_theta(theta):
    return [np.array(t, copy=True) for t in theta]


def a_adaptive_lu_forward(y, a0, prox_fn, eta, theta_init, mm_spec,
                          cfg: LUConfig, x_truth=None, tape=False,
                          keep_snapshots=True, record_J=True):
    """K rounds of z -> theta -> x updates from x0 = z0 = init_x0(y, a0).

    ``prox_fn`` maps the pre-prox point to the new x; in learned mode it
    closes over the proximal network weights (Vars when ``tape``).
    ``eta`` may be a Var for end-to-end training; z and theta updates are
    always computed outside the tape (their results enter as constants).
    Returns (x_K, theta_K, trace); the trace holds K+1 x snapshots.
    """
    x0 = init_x0(y, a0)
    theta = _clone_theta(theta_init)
    z = x0.copy()
    trace = SolverTrace()
    steps = {}

    def J_of(zc, th, xc):
        if not record_J:
            return None
        return objective_J(zc, th, xc, y, a0, mm_spec, cfg)

    trace.record(x0, J=J_of(z, theta, x0), mse=_mse_vs(x0, x_truth),
                 keep_x=keep_snapshots)
    x = Var(x0) if tape else x0
    for k in range(cfg.K):
        x_val = x.value if tape else x
        z = z_update(z, x_val, theta, y, a0, mm_spec, cfg, step_state=steps)
        if k >= cfg.theta_warmup:
            theta = theta_update(theta, z, y, a0, mm_spec, cfg,
                                 step_state=steps)
        x = x_update(x, z, eta, prox_fn)
        x_val = x.value if tape else x
        if not np.all(np.isfinite(x_val)):
            raise NumericalAbortError("non-finite reconstruction iterate")
        trace.record(x_val, J=J_of(z, theta, x_val),
                     mse=_mse_vs(x_val, x_truth), keep_x=keep_snapshots)
    return x, theta, trace


def robust_lu_forward(y, a0, prox_fn, eta, K, x_truth=None, tape=False,
                      keep_snapshots=True):
    """Baseline: K learned proximal-gradient steps with the inexact A0."""
    x0 = init_x0(y, a0)
    trace = SolverTrace()
    trace.record(x0, mse=_mse_vs(x0, x_truth), keep_x=keep_snapshots)
    x = Var(x0) if tape else x0
    for _ in range(K):
        x = prox_grad_step(x, y, a0, eta, prox_fn)
        x_val = x.value if tape else x
        if not np.all(np.isfinite(x_val)):
            raise NumericalAbortError("non-finite reconstruction iterate")
        trace.record(x_val, mse=_mse_vs(x_val, x_truth), keep_x=keep_snapshots)
    return x, trace


def direct_inverse_forward(x0, spec, weights):
    """Baseline: a single network application, no forward operator."""
    return nets.net_forward(spec, weights, x0)


# ---------------------------------------------------------------------------
# fixed-point machinery


def anderson_solve(F, x0, m=5, beta=1.0, ridge=1e-10, tol=1e-4,
                   max_iter=50, callback=None):
    """Anderson-accelerated fixed-point iteration.

    Mixes the last min(k, m) iterates with weights alpha minimizing
    ||sum alpha_i g_i||, sum alpha_i = 1, g_i = F(x_i) - x_i, solved via
    ridge-regularized normal equations.  Falls back to a plain Picard
    step when the mixing system is singular.  Stops when
    ||F(x) - x|| / (1e-8 + ||F(x)||) < tol.

    Returns (x, residual_history, converged).
    """
    x = np.asarray(x0, dtype=np.float64)
    shape = x.shape
    xs, fs = [], []
    history = []
    for _ in range(max_iter):
        fx = np.asarray(F(x.reshape(shape))).reshape(-1)
        xf = x.reshape(-1)
        res = float(np.linalg.norm(fx - xf) / (1e-8 + np.linalg.norm(fx)))
        history.append(res)
        if callback is not None:
            callback(len(history) - 1, xf.reshape(shape), fx.reshape(shape), res)
        if res < tol:
            return fx.reshape(shape), history, True
        xs.append(xf.copy())
        fs.append(fx.copy())
        if len(xs) > m:
            xs.pop(0)
            fs.pop(0)
        if len(xs) == 1:
            xnew = (1.0 - beta) * xf + beta * fx
        else:
            G = np.stack([f - s for f, s in zip(fs, xs)], axis=0)
            A = G @ G.T + ridge * np.eye(len(xs))
            try:
                gamma = np.linalg.solve(A, np.ones(len(xs)))
                alpha = gamma / np.sum(gamma)
                if not np.all(np.isfinite(alpha)):
                    raise np.linalg.LinAlgError
                xnew = ((1.0 - beta) * (alpha @ np.stack(xs))
                        + beta * (alpha @ np.stack(fs)))
            except np.linalg.LinAlgError:
                xnew = fx.copy()
        x = xnew
    return x.reshape(shape), history, False


def a_adaptive_deq_forward(y, a0, prox_fn, eta, theta_init, mm_spec,
                           cfg: DEQConfig, x_truth=None, keep_snapshots=False,
                           record_J=False):
    """Run the alternating update map to a fixed point of x.

    Anderson mixing operates on x only; z and theta are deterministic
    side state carried across applications of the iteration map.
    Returns (x_star, theta_star, trace); ``trace.converged`` is False
    when max_iter is hit first.
    """
    x0 = init_x0(y, a0)
    state = {"z": x0.copy(), "theta": _clone_theta(theta_init), "k": 0}
    lu = cfg.lu
    trace = SolverTrace()
    steps = {}

    def F(x):
        if not np.all(np.isfinite(x)):
            raise NumericalAbortError("non-finite fixed-point iterate")
        state["x_in"] = np.array(x, copy=True)
        state["z"] = z_update(state["z"], x, state["theta"], y, a0, mm_spec,
                              lu, step_state=steps)
        if state["k"] >= lu.theta_warmup:
            state["theta"] = theta_update(state["theta"], state["z"], y, a0,
                                          mm_spec, lu, step_state=steps)
        state["k"] += 1
        fx = x_update(x, state["z"], eta, prox_fn)
        state["fx"] = np.array(fx, copy=True)
        state["z_at_fx"] = np.array(state["z"], copy=True)
        return fx

    def cb(it, x, fx, res):
        J = (objective_J(state["z"], state["theta"], fx, y, a0, mm_spec, lu)
             if record_J else None)
        trace.record(fx, J=J, mse=_mse_vs(fx, x_truth), fp_residual=res,
                     keep_x=keep_snapshots)

    _, history, converged = anderson_solve(
        F, x0, m=cfg.anderson_m, beta=cfg.beta, ridge=cfg.ridge,
        tol=cfg.tol, max_iter=cfg.max_iter, callback=cb)
    trace.converged = converged
    # report the output of the last map application (not a mixed iterate),
    # so the one-step backward can be rebuilt at exactly that application
    trace.aux = {"x_in": state["x_in"], "z": state["z_at_fx"]}
    return state["fx"], state["theta"], trace


def deq_backward_contract(x_in, z_final, prox_fn_tape, eta_var, loss_fn,
                          params):
    """One-step gradients at the fixed point.

    Re-applies the final x update at the converged state, with the
    incoming x and the z/theta side state treated as constants, and
    differentiates loss(x_plus) w.r.t. ``params`` (the proximal weight
    and step size Vars captured by ``prox_fn_tape`` / ``eta_var``).
    """
    x_plus = x_update(Var(np.asarray(x_in)), np.asarray(z_final), eta_var,
                      prox_fn_tape)
    loss = loss_fn(x_plus)
    grads = dc.grad(loss, params)
    for p, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbortError("non-finite gradient in one-step backward")
    return grads, float(loss.value)

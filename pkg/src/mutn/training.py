"""End-to-end training and checkpointed evaluation of the four model kinds.

The outer optimizer (Adam) only ever touches the proximal-network weights
rho and the step size eta.  The mismatch weights theta are updated solely
by the solvers' inner rule: during training one warm-started theta persists
across batches; at evaluation each instance starts from its own clone
(saved weights or a fresh draw) and adapts independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import io as mio
from . import metrics as mx
from . import networks as nets
from . import operators as ops
from . import solvers as sv
from .diffcore import Var

MODEL_KINDS = ("direct", "robust_lu", "aa_lu", "aa_deq")
TASKS = ("deconv", "deblur", "defog")


def default_prox_spec(task: str) -> nets.ConvNetSpec:
    """Residual denoiser: 5 layers for signals/deblurring, 7 for defogging."""
    if task == "deconv":
        return nets.ConvNetSpec(1, 1, 32, 1, 5, kernel_size=5, residual=True)
    if task == "deblur":
        return nets.ConvNetSpec(2, 3, 32, 3, 5, kernel_size=3, residual=True)
    if task == "defog":
        return nets.ConvNetSpec(2, 3, 32, 3, 7, kernel_size=3, residual=True)
    raise ValueError(f"unknown task {task!r}")


def default_mismatch_spec(task: str) -> nets.ConvNetSpec:
    """3-layer residual predictor over (prediction, feature plane) channels."""
    if task == "deconv":
        return nets.ConvNetSpec(1, 2, 16, 1, 3, kernel_size=5)
    if task in ("deblur", "defog"):
        return nets.ConvNetSpec(2, 4, 16, 3, 3, kernel_size=3)
    raise ValueError(f"unknown task {task!r}")


@dataclass
class TrainConfig:
    model_kind: str = "aa_lu"
    task: str = "deconv"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eta0: float = 0.5
    val_fraction: float = 0.1
    fog_beta0: float = 1.0
    fog_l_air0: float = 0.85
    lu: sv.LUConfig = field(default_factory=sv.LUConfig)
    deq: sv.DEQConfig = field(default_factory=sv.DEQConfig)
    prox_spec: nets.ConvNetSpec = None
    mm_spec: nets.ConvNetSpec = None

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model_kind {self.model_kind!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.prox_spec is None:
            self.prox_spec = default_prox_spec(self.task)
        if self.mm_spec is None:
            self.mm_spec = default_mismatch_spec(self.task)


@dataclass
class Checkpoint:
    cfg: TrainConfig
    rho: list
    eta: float
    theta: list
    curves: dict  # {"train": [...], "val": [...]}


class Adam:
    """Adaptive-moment gradient descent over a list of arrays."""

    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


# ---------------------------------------------------------------------------
# operator construction and batching


def build_operator(cfg: TrainConfig, features: np.ndarray, data_shape):
    """Approximate forward operator for a stacked batch of features.

    ``features`` carries a leading batch axis; ``data_shape`` is the
    per-sample (C, ...) shape.
    """
    features = np.asarray(features, dtype=np.float64)
    if cfg.task == "deconv":
        return ops.stacked_toeplitz_operator(features, data_shape[-1])
    if cfg.task == "deblur":
        return ops.stacked_blur_operator(features, data_shape)
    return ops.fog_approx_operator(features, cfg.fog_beta0, cfg.fog_l_air0,
                                   data_shape)


def stack_batch(samples):
    """Stack sample triples into (x, y, features) batch arrays."""
    x = np.stack([s.x for s in samples])
    y = np.stack([s.y for s in samples])
    feats = np.stack([s.a0_features for s in samples])
    return x, y, feats


# ---------------------------------------------------------------------------
# forward passes


def model_forward(cfg: TrainConfig, y, a0, rho, eta, theta, tape=False,
                  x_truth=None, keep_snapshots=False, lu=None, deq=None,
                  record_J=True):
    """Run the configured model; returns (x_out, theta_out, trace).

    ``rho`` entries and ``eta`` may be Vars when ``tape``; theta never is.
    """
    lu = cfg.lu if lu is None else lu
    deq = cfg.deq if deq is None else deq
    kind = cfg.model_kind
    if kind == "direct":
        x0 = sv.init_x0(np.asarray(y, dtype=np.float64), a0)
        out = nets.net_forward(cfg.prox_spec, rho, x0)
        trace = sv.SolverTrace()
        out_val = out.value if isinstance(out, Var) else out
        trace.record(x0, mse=sv._mse_vs(x0, x_truth), keep_x=keep_snapshots)
        trace.record(out_val, mse=sv._mse_vs(out_val, x_truth),
                     keep_x=keep_snapshots)
        return out, theta, trace

    prox = lambda v: nets.prox_forward(cfg.prox_spec, rho, v)
    if kind == "robust_lu":
        x, trace = sv.robust_lu_forward(y, a0, prox, eta, K=lu.K,
                                        x_truth=x_truth, tape=tape,
                                        keep_snapshots=keep_snapshots)
        return x, theta, trace
    if kind == "aa_lu":
        return sv.a_adaptive_lu_forward(y, a0, prox, eta, theta, cfg.mm_spec,
                                        lu, x_truth=x_truth, tape=tape,
                                        keep_snapshots=keep_snapshots,
                                        record_J=record_J)
    if tape:
        raise ValueError("aa_deq uses the one-step backward, not the tape")
    return sv.a_adaptive_deq_forward(y, a0, prox, eta, theta, cfg.mm_spec,
                                     deq, x_truth=x_truth,
                                     keep_snapshots=keep_snapshots,
                                     record_J=record_J)


def _batch_loss_and_grads(cfg, x, y, feats, rho, eta, theta):
    """MSE loss on the final reconstruction and its gradients w.r.t.

    the outer parameters (rho, and eta for the unrolled kinds)."""
    a0 = build_operator(cfg, feats, x.shape[1:])
    rho_vars = [Var(w, requires_grad=True) for w in rho]
    params = list(rho_vars)
    eta_var = None
    if cfg.model_kind != "direct":
        eta_var = Var(np.asarray(float(eta)), requires_grad=True)
        params.append(eta_var)

    inv_size = 1.0 / x.size
    if cfg.model_kind == "aa_deq":
        prox_np = lambda v: nets.prox_forward(cfg.prox_spec, rho, v)
        _, theta_new, trace = sv.a_adaptive_deq_forward(
            y, a0, prox_np, float(eta), theta, cfg.mm_spec, cfg.deq,
            record_J=False)
        prox_tape = lambda v: nets.prox_forward(cfg.prox_spec, rho_vars, v)
        loss_fn = lambda xv: dc.mul(dc.sq_norm(dc.sub(xv, Var(x))), inv_size)
        grads, loss_val = sv.deq_backward_contract(
            trace.aux["x_in"], trace.aux["z"], prox_tape, eta_var, loss_fn,
            params)
    else:
        x_var, theta_new, _ = model_forward(cfg, y, a0, rho_vars, eta_var or eta,
                                            theta, tape=True, record_J=False)
        loss = dc.mul(dc.sq_norm(dc.sub(x_var, Var(x))), inv_size)
        loss_val = float(loss.value)
        grads = dc.grad(loss, params)
    g_list = [grads[p] for p in params]
    return loss_val, g_list, rho_vars, eta_var, theta_new


def dataset_mse(cfg: TrainConfig, samples, rho, eta, theta,
                batch_size=None) -> float:
    """Mean squared reconstruction error over a sample list (no tape)."""
    if not samples:
        return float("nan")
    bs = batch_size or cfg.batch_size
    total, count = 0.0, 0
    for start in range(0, len(samples), bs):
        chunk = samples[start:start + bs]
        x, y, feats = stack_batch(chunk)
        a0 = build_operator(cfg, feats, x.shape[1:])
        out, _, _ = model_forward(cfg, y, a0, rho, eta, theta, record_J=False)
        out = out.value if isinstance(out, Var) else out
        total += float(np.sum((out - x) ** 2))
        count += x.size
    return total / count


# ---------------------------------------------------------------------------
# training


def train(dataset, cfg: TrainConfig) -> Checkpoint:
    """Minimize MSE(x_K, x) over (rho, eta) with Adam.

    theta is warm-started across batches but only ever updated by the
    solver's inner rule; records per-epoch train/validation curves.
    """
    if not dataset:
        raise ValueError("empty dataset")
    _check_modality(cfg, dataset[0])
    n_val = int(round(cfg.val_fraction * len(dataset)))
    train_set = dataset[:len(dataset) - n_val]
    val_set = dataset[len(dataset) - n_val:]

    rho = nets.init_params(cfg.prox_spec, "kaiming-uniform", cfg.seed)
    # start the learned prox at the identity (zero body output) so the
    # unrolled iterations are stable before any training has happened
    rho[-1] = np.zeros_like(rho[-1])
    eta = float(cfg.eta0)
    theta = nets.init_params(cfg.mm_spec, "kaiming-uniform", cfg.seed + 1)

    n_outer = len(rho) + (0 if cfg.model_kind == "direct" else 1)
    shapes = [w.shape for w in rho] + ([()] if cfg.model_kind != "direct" else [])
    opt = Adam(shapes, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    assert len(shapes) == n_outer  # theta stays outside the outer optimizer

    curves = {"train": [], "val": []}
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(1000 + epoch,))
        ).permutation(len(train_set))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_set[i] for i in order[start:start + cfg.batch_size]]
            x, y, feats = stack_batch(chunk)
            loss, grads, _, _, theta = _batch_loss_and_grads(
                cfg, x, y, feats, rho, eta, theta)
            if not np.isfinite(loss):
                raise sv.NumericalAbortError(
                    f"training loss diverged at epoch {epoch}")
            params = list(rho) + ([np.asarray(eta)] if cfg.model_kind != "direct" else [])
            new_params = opt.step(params, grads)
            rho = new_params[:len(rho)]
            if cfg.model_kind != "direct":
                eta = float(new_params[-1])
            epoch_loss += loss * len(chunk)
            seen += len(chunk)
        curves["train"].append(epoch_loss / seen)
        curves["val"].append(dataset_mse(cfg, val_set, rho, eta, theta))
    return Checkpoint(cfg=cfg, rho=rho, eta=eta, theta=theta, curves=curves)


# ---------------------------------------------------------------------------
# evaluation


def _check_modality(cfg: TrainConfig, sample):
    expect = cfg.prox_spec.ndim + 1  # channel axis + spatial rank
    if np.asarray(sample.x).ndim != expect:
        raise ValueError(
            f"dataset rank {np.asarray(sample.x).ndim} does not match "
            f"model modality (expected {expect} axes)")


THETA_SOURCES = ("saved", "kaiming-uniform", "uniform", "xavier")


def _theta_for(ckpt: Checkpoint, source: str, index: int):
    if source == "saved":
        return [np.array(t, copy=True) for t in ckpt.theta]
    scheme = "xavier" if source == "xavier" else "kaiming-uniform"
    return nets.init_params(ckpt.cfg.mm_spec, scheme,
                            ckpt.cfg.seed + 7919 * (index + 1))


def evaluate(ckpt: Checkpoint, dataset, theta_source: str = "saved",
             iter_override: int = None):
    """Per-instance evaluation; returns (MetricsReport, list of traces).

    Each instance gets its own theta clone (or fresh draw), so the inner
    adaptation runs independently per sample.  ``iter_override`` replaces
    K (unrolled kinds) or max_iter (equilibrium kind).
    """
    cfg = ckpt.cfg
    if theta_source not in THETA_SOURCES:
        raise ValueError(f"unknown theta_source {theta_source!r}")
    if not dataset:
        raise ValueError("empty dataset")
    _check_modality(cfg, dataset[0])
    lu, deq = cfg.lu, cfg.deq
    if iter_override is not None:
        if cfg.model_kind == "aa_deq":
            deq = replace(deq, max_iter=iter_override)
        else:
            lu = replace(lu, K=iter_override)
            deq = replace(deq, lu=lu)

    report = mx.MetricsReport()
    traces = []
    for i, s in enumerate(dataset):
        x = s.x[None]
        y = s.y[None]
        feats = s.a0_features[None]
        a0 = build_operator(cfg, feats, x.shape[1:])
        theta = _theta_for(ckpt, theta_source, i)
        out, _, trace = model_forward(cfg, y, a0, ckpt.rho, ckpt.eta, theta,
                                      x_truth=x, keep_snapshots=False,
                                      lu=lu, deq=deq)
        out = out.value if isinstance(out, Var) else out
        peak = 1.0 if cfg.task != "deconv" else float(np.max(np.abs(s.x)))
        report.add(i, mx.psnr(s.x, out[0], peak=peak),
                   mx.ssim(s.x, out[0], peak=peak), mx.mse(s.x, out[0]))
        traces.append(trace)
    return report, traces


# ---------------------------------------------------------------------------
# checkpoint persistence


def _spec_echo(prefix, spec: nets.ConvNetSpec) -> dict:
    return {f"{prefix}.ndim": spec.ndim,
            f"{prefix}.in_channels": spec.in_channels,
            f"{prefix}.hidden_channels": spec.hidden_channels,
            f"{prefix}.out_channels": spec.out_channels,
            f"{prefix}.depth": spec.depth,
            f"{prefix}.kernel_size": spec.kernel_size,
            f"{prefix}.residual": spec.residual,
            f"{prefix}.out_scale": spec.out_scale}


def _spec_from_echo(prefix, d) -> nets.ConvNetSpec:
    return nets.ConvNetSpec(
        ndim=d[f"{prefix}.ndim"], in_channels=d[f"{prefix}.in_channels"],
        hidden_channels=d[f"{prefix}.hidden_channels"],
        out_channels=d[f"{prefix}.out_channels"], depth=d[f"{prefix}.depth"],
        kernel_size=d[f"{prefix}.kernel_size"],
        residual=bool(d[f"{prefix}.residual"]),
        out_scale=float(d[f"{prefix}.out_scale"]))


def config_echo(cfg: TrainConfig) -> dict:
    """Flatten a TrainConfig into `section.key` pairs."""
    out = {"train.model_kind": cfg.model_kind, "train.task": cfg.task,
           "train.epochs": cfg.epochs, "train.batch_size": cfg.batch_size,
           "train.lr": cfg.lr, "train.beta1": cfg.beta1,
           "train.beta2": cfg.beta2, "train.adam_eps": cfg.adam_eps,
           "train.seed": cfg.seed, "train.eta0": cfg.eta0,
           "train.val_fraction": cfg.val_fraction,
           "train.fog_beta0": cfg.fog_beta0,
           "train.fog_l_air0": cfg.fog_l_air0,
           "lu.K": cfg.lu.K, "lu.lam": cfg.lu.lam, "lu.tau": cfg.lu.tau,
           "lu.gamma": cfg.lu.gamma, "lu.r_mode": cfg.lu.r_mode,
           "lu.inner_steps_z": cfg.lu.inner_steps_z,
           "lu.inner_steps_theta": cfg.lu.inner_steps_theta,
           "lu.inner_lr_z": cfg.lu.inner_lr_z,
           "lu.inner_lr_theta": cfg.lu.inner_lr_theta,
           "lu.backtracking": cfg.lu.backtracking,
           "lu.theta_warmup": cfg.lu.theta_warmup,
           "deq.max_iter": cfg.deq.max_iter,
           "deq.anderson_m": cfg.deq.anderson_m, "deq.beta": cfg.deq.beta,
           "deq.ridge": cfg.deq.ridge, "deq.tol": cfg.deq.tol}
    out.update(_spec_echo("prox", cfg.prox_spec))
    out.update(_spec_echo("mm", cfg.mm_spec))
    return out


def config_from_echo(d: dict) -> TrainConfig:
    lu = sv.LUConfig(
        K=d["lu.K"], lam=d["lu.lam"], tau=d["lu.tau"], gamma=d["lu.gamma"],
        r_mode=d["lu.r_mode"], inner_steps_z=d["lu.inner_steps_z"],
        inner_steps_theta=d["lu.inner_steps_theta"],
        inner_lr_z=d["lu.inner_lr_z"], inner_lr_theta=d["lu.inner_lr_theta"],
        backtracking=bool(d["lu.backtracking"]),
        theta_warmup=d["lu.theta_warmup"])
    deq = sv.DEQConfig(max_iter=d["deq.max_iter"],
                       anderson_m=d["deq.anderson_m"], beta=d["deq.beta"],
                       ridge=d["deq.ridge"], tol=d["deq.tol"], lu=lu)
    return TrainConfig(
        model_kind=d["train.model_kind"], task=d["train.task"],
        epochs=d["train.epochs"], batch_size=d["train.batch_size"],
        lr=d["train.lr"], beta1=d["train.beta1"], beta2=d["train.beta2"],
        adam_eps=d["train.adam_eps"], seed=d["train.seed"],
        eta0=d["train.eta0"], val_fraction=d["train.val_fraction"],
        fog_beta0=d["train.fog_beta0"], fog_l_air0=d["train.fog_l_air0"],
        lu=lu, deq=deq, prox_spec=_spec_from_echo("prox", d),
        mm_spec=_spec_from_echo("mm", d))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = {"eta": np.asarray(ckpt.eta, dtype=np.float64),
               "curves.train": np.asarray(ckpt.curves["train"], dtype=np.float64),
               "curves.val": np.asarray(ckpt.curves["val"], dtype=np.float64)}
    for i, w in enumerate(ckpt.rho):
        tensors[f"rho.{i}"] = w
    for i, w in enumerate(ckpt.theta):
        tensors[f"theta.{i}"] = w
    mio.save_tensors(path, tensors, metadata=mio.format_config(
        config_echo(ckpt.cfg)))


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = mio.load_tensors(path)
    cfg = config_from_echo(mio.parse_config(meta))
    rho = [tensors[f"rho.{i}"] for i in range(len(cfg.prox_spec.layer_shapes()))]
    theta = [tensors[f"theta.{i}"] for i in range(len(cfg.mm_spec.layer_shapes()))]
    return Checkpoint(cfg=cfg, rho=rho,
                      eta=float(tensors["eta"].reshape(-1)[0]),
                      theta=theta,
                      curves={"train": tensors["curves.train"].tolist(),
                              "val": tensors["curves.val"].tolist()})

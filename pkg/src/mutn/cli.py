"""Command-line front end: gen-data, train, eval, reproduce.

Exit codes: 0 on success, 1 for configuration/usage errors, 2 when a run
aborts numerically.  The MUTN_SEED environment variable, when set,
overrides the seed from config files and defaults (explicit --seed flags
still win).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from . import experiments as ex
from . import io as mio
from . import solvers as sv
from . import synthdata as sd
from . import training as tr


def _env_seed(default):
    raw = os.environ.get("MUTN_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"MUTN_SEED must be an integer, got {raw!r}")


def _resolve_seed(flag_value, default=0):
    """Explicit flag > MUTN_SEED > default."""
    if flag_value is not None:
        return flag_value
    return _env_seed(default)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    seed = _resolve_seed(args.seed)
    noise = sd.NoiseSpec(args.sigma, seed)
    if args.task == "deconv":
        half = min(25, (args.n - 1) // 2)
        samples = sd.gen_seismic_dataset(args.count, n=args.n,
                                         mismatch_delta=args.mismatch_delta,
                                         wavelet_half_len=half, noise=noise)
    elif args.task == "deblur":
        samples = sd.gen_deblur_dataset(args.count, hw=(args.height, args.width),
                                        a0_sigma=args.a0_sigma, noise=noise)
    else:
        samples = sd.gen_fog_dataset(args.count, h=args.height, w=args.width,
                                     noise=noise)
    sd.save_dataset(args.out, samples,
                    metadata={"data.task": args.task, "data.seed": seed,
                              "data.sigma": args.sigma})
    print(f"wrote {len(samples)} {args.task} samples to {args.out}")
    return 0


def _load_train_config(path):
    """Build a full training config from a partial `section.key` file."""
    overrides = mio.parse_config_file(path)
    base = tr.TrainConfig(
        model_kind=overrides.get("train.model_kind", "aa_lu"),
        task=overrides.get("train.task", "deconv"))
    echo = tr.config_echo(base)
    unknown = set(overrides) - set(echo)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    echo.update(overrides)
    return tr.config_from_echo(echo)


def cmd_train(args):
    cfg = _load_train_config(args.config)
    if args.seed is not None or os.environ.get("MUTN_SEED") is not None:
        cfg.seed = _resolve_seed(args.seed, cfg.seed)
    samples, _ = sd.load_dataset(args.data)
    ckpt = tr.train(samples, cfg)
    tr.save_checkpoint(args.out, ckpt)
    tail = ckpt.curves["val"][-1] if ckpt.curves["val"] else float("nan")
    print(f"trained {cfg.model_kind} for {cfg.epochs} epochs "
          f"(final val mse {tail:.6g}); checkpoint at {args.out}")
    return 0


def cmd_eval(args):
    ckpt = tr.load_checkpoint(args.ckpt)
    samples, _ = sd.load_dataset(args.data)
    report, _ = tr.evaluate(ckpt, samples, theta_source=args.theta_init,
                            iter_override=args.iters)
    echo = tr.config_echo(ckpt.cfg)
    echo["eval.theta_init"] = args.theta_init
    if args.iters is not None:
        echo["eval.iters"] = args.iters
    mio.write_csv(args.out, ["instance", "psnr_db", "ssim", "mse"],
                  report.rows(), __version__, mio.config_hash(echo),
                  ckpt.cfg.seed)
    agg = report.aggregate()
    print(f"psnr {agg['psnr_db'][0]:.2f}±{agg['psnr_db'][1]:.2f} dB, "
          f"ssim {agg['ssim'][0]:.3f}; per-instance rows in {args.out}")
    return 0


def cmd_reproduce(args):
    seed = _resolve_seed(args.seed)
    result = ex.run_experiment(args.name, args.out_dir,
                               scale_name=args.scale, seed=seed)
    print(f"{args.name} ({args.scale}) done; wrote {result['csv']}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(
        prog="mutn",
        description="Model-adaptive unrolled solvers for inverse problems")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--task", choices=tr.TASKS, default="deconv")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--sigma", type=float, default=0.01,
                   help="relative noise level")
    g.add_argument("--n", type=int, default=128, help="signal length (deconv)")
    g.add_argument("--mismatch-delta", type=float, default=0.1)
    g.add_argument("--height", type=int, default=24)
    g.add_argument("--width", type=int, default=24)
    g.add_argument("--a0-sigma", type=float, default=7.0,
                   help="assumed blur kernel variance (deblur)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--theta-init", choices=("saved", "uniform", "xavier"),
                   default="saved")
    e.add_argument("--iters", type=int, default=None,
                   help="override the iteration count at evaluation")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reproduce", help="run a named experiment")
    r.add_argument("name", choices=ex.EXPERIMENTS)
    r.add_argument("--out-dir", default="runs")
    r.add_argument("--scale", choices=tuple(ex.SCALES), default="desk")
    r.add_argument("--seed", type=int, default=None)
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except sv.NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, mio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

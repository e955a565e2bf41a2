"""Command-line front end: ``train``, ``sample``, ``analyze`` and ``gradcheck``.

Exit codes: 0 success, 1 gradient check failure, 2 invalid configuration
or input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import container
from .analysis import similarity_matrix
from .config import ConfigError, SampleConfig, load_config
from .data import sample_batch
from .gradcheck import COMPONENTS, TOLERANCE, run_gradcheck, tiny_config
from .interpolant import interpolate
from .model import forward
from .sampler import sample, sample_labels, write_samples
from .tensor import Rng
from .trainer import NumericError, init_state, load_checkpoint, train

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _load_ckpt(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except container.ContainerError as exc:
        raise UsageError(f"{path}: {exc}") from exc


# ------------------------------------------------------------------ train


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.resume:
        state = _load_ckpt(args.resume)
        old, new = state.config.to_dict(), config.to_dict()
        for group in ("model", "data", "diversity"):
            if old[group] != new[group]:
                raise ConfigError(f"--resume: '{group}' differs from the checkpoint's config")
        state.config = config
    else:
        state = init_state(config)
    state = train(state, args.out)
    print(f"trained to step {state.step}; outputs in {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------- sample


def cmd_sample(args) -> int:
    state = _load_ckpt(args.ckpt)
    base = state.config.sample
    try:
        cfg = SampleConfig(
            num_steps=base.num_steps if args.steps is None else args.steps,
            mode=base.mode if args.mode is None else args.mode,
            cfg_scale=base.cfg_scale if args.cfg is None else args.cfg,
            class_id=None if args.uncond else (base.class_id if args.class_id is None
                                               else args.class_id),
            num_samples=base.num_samples if args.n is None else args.n,
            seed=base.seed if args.seed is None else args.seed,
            t_min=base.t_min,
        )
        labels = sample_labels(state.config.model, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    counter = [0]
    x = sample(state.params, state.config.model, cfg, labels=labels, counter=counter)
    write_samples(args.out, x, labels, state.config.model.null_class,
                  meta={"step": state.step, "mode": cfg.mode, "cfg_scale": cfg.cfg_scale})
    print(f"wrote {x.shape[0]} samples to {args.out} ({counter[0]} forward passes)",
          file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    if not 0 < args.t <= 1:
        raise UsageError("--t must lie in (0, 1]")
    if args.batch < 1:
        raise UsageError("--batch must be >= 1")
    state = _load_ckpt(args.ckpt)
    config = state.config
    rng = Rng(args.seed)
    x, y = sample_batch(config.data, args.batch, rng)
    eps = rng.normal(x.shape)
    t = np.full(args.batch, args.t)
    _, feats = forward(state.params, config.model, interpolate(x, eps, t), t, y)
    meta = {"step": state.step, "t": args.t, "batch": args.batch}
    matrix = similarity_matrix(feats, args.kernel, subsample=args.subsample, seed=args.seed,
                               meta=meta)
    matrix.to_csv(args.out)
    if args.dump_features:
        container.write(args.dump_features,
                        {f"block_{i:02d}": f.data for i, f in enumerate(feats)}, meta)
    print(f"wrote {matrix.num_blocks}x{matrix.num_blocks} CKA matrix to {args.out}")
    return EXIT_OK


# -------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    config = load_config(args.config) if args.config else tiny_config()
    errors = run_gradcheck(config, draws=args.draws, seed=args.seed, corrupt=args.corrupt)
    ok = True
    for name in COMPONENTS:
        if name not in errors:
            print(f"{name:<14} skipped (disabled in config)")
            continue
        passed = errors[name] <= TOLERANCE
        ok &= passed
        print(f"{name:<14} max_rel_err={errors[name]:.3e}  {'PASS' if passed else 'FAIL'}")
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAIL


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="blockdiv", formatter_class=fmt,
                                     description="Train, sample and analyse block-diverse "
                                                 "flow-matching transformers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", formatter_class=fmt, help="run the training loop")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", formatter_class=fmt,
                       help="draw samples from a checkpoint (unset flags use its config)")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--mode", choices=("sde", "ode"), default=None,
                   help="integrator; config value, sde out of the box")
    p.add_argument("--steps", type=int, default=None,
                   help="integration steps; config value, 250 out of the box")
    p.add_argument("--cfg", type=float, default=None,
                   help="guidance scale, 1.0 = no guidance; config value, 1.0 out of the box")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--class", dest="class_id", type=int, default=None,
                       help="class id to condition on")
    group.add_argument("--uncond", action="store_true", help="sample unconditionally")
    p.add_argument("--n", type=int, default=None,
                   help="number of samples; config value, 16 out of the box")
    p.add_argument("--seed", type=int, default=None, help="sampling seed; config value")
    p.add_argument("--out", required=True, help="CSV (2-D points) or container output")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("analyze", formatter_class=fmt,
                       help="block-by-block CKA matrix at one timestep")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--t", type=float, default=0.5, help="noise level in (0, 1]")
    p.add_argument("--batch", type=int, default=64, help="fresh samples to push through")
    p.add_argument("--kernel", choices=("linear", "rbf"), default="rbf", help="CKA kernel")
    p.add_argument("--subsample", type=int, default=512, help="max token rows per block")
    p.add_argument("--seed", type=int, default=0, help="data and subsampling seed")
    p.add_argument("--out", required=True, help="CKA matrix CSV")
    p.add_argument("--dump-features", default=None, help="optional container of block features")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="finite-difference check of every loss gradient")
    p.add_argument("--config", default=None, help="tiny run config (L <= 4, D <= 16); "
                                                  "built-in tiny config if omitted")
    p.add_argument("--draws", type=int, default=5, help="random parameter/batch draws")
    p.add_argument("--seed", type=int, default=0, help="probe seed")
    p.add_argument("--corrupt", choices=COMPONENTS, default=None,
                   help="negative control: perturb this component's analytic gradient")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

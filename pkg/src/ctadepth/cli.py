"""Command-line entry point.

Subcommands: render a synthetic scene to disk, train on a scene directory,
evaluate a checkpoint, run single-frame inference, and run the
finite-difference gradient check suite. Exit codes: 0 success, 1 usage
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting with code 2."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _build_parser():
    parser = _Parser(prog="ctadepth",
                     description="multi-frame depth and pose estimation on "
                                 "synthetic scenes")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                              parser_class=_Parser)

    p = sub.add_parser("render",
                       help="render a synthetic scene to a directory")
    p.add_argument("--spec", help="scene spec file (flat key = value)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train",
                       help="train a model and write a checkpoint")
    p.add_argument("--config", help="training config file")
    p.add_argument("--data", help="scene directory (default: built-in scene)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log path")

    p = sub.add_parser("eval",
                       help="evaluate a checkpoint, one metric line per stage")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="scene directory (default: built-in scene)")
    p.add_argument("--cap", type=float, default=80.0)
    p.add_argument("--median-scaling", action="store_true")
    p.add_argument("--dynamic-only", action="store_true",
                   help="restrict metrics to moving-object pixels")

    p = sub.add_parser("infer",
                       help="predict depth for one frame and write PFM + PPM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="scene directory (default: built-in scene)")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gradcheck",
                       help="run the finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _scene_spec(path, seed):
    from .synth import default_scene
    overrides = {"seed": seed}
    if path:
        allowed = {"height": int, "width": int, "n_frames": int, "seed": int}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key not in allowed:
                    raise ValueError(f"{path}:{lineno}: unknown scene key {key!r}")
                overrides[key] = allowed[key](value)
    return default_scene(**overrides)


def _load_data(data_dir, config):
    from . import pipeline
    from .synth import load_scene_dir, make_splits
    if data_dir is None:
        return pipeline.default_samples(config)
    samples, cam = load_scene_dir(data_dir)
    train, evals = make_splits(samples, config.train_frac, config.seed)
    return train, evals, cam


def _restore(ckpt_path, config):
    from . import pipeline
    tensors = pipeline.load_checkpoint(ckpt_path)
    store, model, refiner = pipeline.build_runtime(config)
    pipeline.load_into_store(tensors, store, config)
    return store, model, refiner


def _cmd_render(args):
    from .synth import save_scene_dir
    spec = _scene_spec(args.spec, args.seed)
    frames = save_scene_dir(args.out, spec)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def _cmd_train(args):
    from . import pipeline
    config = pipeline.parse_config(args.config) if args.config \
        else pipeline.TrainConfig()
    train_samples, _, cam = _load_data(args.data, config)
    store, model, refiner, log = pipeline.train(config, train_samples, cam)
    pipeline.save_checkpoint(args.out, pipeline.checkpoint_tensors(store, config))
    text = "\n".join(log) + "\n"
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_eval(args):
    from . import pipeline
    config = pipeline.TrainConfig(cap=args.cap)
    _, model, refiner = _restore(args.ckpt, config)
    _, evals, cam = _load_data(args.data, config)
    reports = pipeline.evaluate(model, refiner, evals, cam, config,
                                median_scaling=args.median_scaling,
                                dynamic_only=args.dynamic_only)
    for stage, rep in enumerate(reports):
        print(f"stage {stage}\t{rep.to_line()}")
    return 0


def _cmd_infer(args):
    from . import pipeline
    from . import tensor as T
    from .synth import write_pfm, write_ppm
    config = pipeline.TrainConfig()
    _, model, refiner = _restore(args.ckpt, config)
    train_samples, evals, cam = _load_data(args.data, config)
    by_index = {s.index: s for s in train_samples + evals}
    if args.frame not in by_index:
        raise ValueError(f"frame {args.frame} has no sample "
                         f"(available: {sorted(by_index)})")
    sample = by_index[args.frame]
    with T.no_grad():
        _, _, trace = pipeline.forward_sample(model, refiner, sample, cam, config)
    depth = trace.depths[-1].values.data[0]
    import os
    os.makedirs(args.out, exist_ok=True)
    write_pfm(os.path.join(args.out, f"pred_{args.frame:04d}.pfm"), depth)
    lo, hi = config.d_min, config.d_max
    gray = np.clip(np.round((depth - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    write_ppm(os.path.join(args.out, f"pred_{args.frame:04d}.ppm"),
              np.repeat(gray[:, :, None], 3, axis=2))
    print(f"wrote predicted depth for frame {args.frame} to {args.out}")
    return 0


def _cmd_gradcheck(args):
    from .gradcheck import run_suite
    worst = run_suite(seed=args.seed, verbose=True)
    print(f"max relative error {worst:.3e}")
    return 0


_COMMANDS = {
    "render": _cmd_render,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - map any failure to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

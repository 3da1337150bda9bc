"""Command-line interface: partition, gen, train, eval, gradcheck, bench.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (divergence or a failed gradient check). Heavy imports happen inside
the command handlers so that --threads can pin kernel thread counts through
the environment before numpy loads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

log = logging.getLogger("mspt.cli")

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here wants 1.
    def error(self, message):
        raise UsageError(message)


def _log_config(command, **fields):
    resolved = {"command": command}
    resolved.update(fields)
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True, default=str))


def _resolve(args, name, default):
    value = getattr(args, name, None)
    return default if value is None else value


def _parse_grid(text):
    try:
        gh, gw = text.lower().split("x")
        return int(gh), int(gw)
    except ValueError as e:
        raise UsageError(f"--grid expects HxW, got {text!r}") from e


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from e


def _load_coords(path):
    import numpy as np

    from .errors import DataFormatError

    if not os.path.exists(path):
        raise DataFormatError(f"coords file {path} does not exist")
    try:
        if path.endswith(".npy"):
            coords = np.load(path)
        else:
            coords = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as e:
        raise DataFormatError(f"cannot parse coords from {path}: {e}") from e
    return np.asarray(coords, dtype=np.float64)


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------


def cmd_partition(args):
    from . import balltree as bt
    from .errors import ConfigError

    coords = _load_coords(args.coords)
    n = coords.shape[0]
    k = args.patches
    if k < 1 or k > n:
        raise UsageError(f"--patches must be in [1, {n}] for {n} points, got {k}")
    l = -(-n // k)
    cap = args.leaf_capacity if args.leaf_capacity is not None else l
    _log_config("partition", coords=args.coords, patches=k, leaf_capacity=cap,
                seed=_resolve(args, "seed", 0))
    tree = bt.build_tree(coords, leaf_capacity=cap)
    try:
        layout = bt.make_patches(bt.leaf_order(tree), n, k)
    except ConfigError as e:
        raise UsageError(str(e)) from e
    doc = {
        "n": int(layout.n),
        "k": int(layout.k),
        "l": int(layout.l),
        "perm": [int(i) for i in layout.perm],
        "valid": [bool(v) for v in layout.valid],
    }
    print(json.dumps(doc))
    return 0


def cmd_gen(args):
    from . import data as da

    seed = _resolve(args, "seed", 0)
    if args.task == "darcy":
        if args.grid is None:
            raise UsageError("gen --task darcy requires --grid HxW")
        grid = _parse_grid(args.grid)
        _log_config("gen", task="darcy", grid=list(grid),
                    n_samples=args.n_samples, seed=seed, out=args.out)
        samples, prov = da.gen_darcy(grid, args.n_samples, seed=seed)
    else:
        if args.points is None:
            raise UsageError("gen --task pointcloud requires --points N")
        _log_config("gen", task="pointcloud", points=args.points,
                    n_samples=args.n_samples, seed=seed, out=args.out)
        samples, prov = da.gen_pointcloud_operator(args.points, args.n_samples, seed=seed)
    da.write_dataset(args.out, samples, generator=prov)
    print(json.dumps({"written": len(samples), "out": args.out}))
    return 0


def _load_json(path, what):
    from .errors import DataFormatError

    if not os.path.exists(path):
        raise DataFormatError(f"{what} file {path} does not exist")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{what} file {path} is not valid JSON: {e}") from e


def cmd_train(args):
    from . import data as da
    from . import model as mdl
    from . import training as tr
    from .errors import DataFormatError

    raw = _load_json(args.config, "config")
    if "model" not in raw or "train" not in raw:
        raise DataFormatError(f"{args.config} needs 'model' and 'train' sections")
    try:
        model_cfg = mdl.ModelConfig.from_dict(raw["model"])
        train_kwargs = dict(raw["train"])
        seed = getattr(args, "seed", None)
        if seed is not None:
            train_kwargs["seed"] = seed
        precision = getattr(args, "precision", None)
        if precision is not None:
            train_kwargs["precision"] = precision
        tcfg = tr.TrainConfig(**train_kwargs)
    except TypeError as e:
        raise DataFormatError(f"bad config field: {e}") from e
    _log_config("train", config=args.config, data=args.data, out=args.out,
                model=model_cfg.to_dict(), train=dataclasses.asdict(tcfg),
                seed=tcfg.seed)
    samples, _manifest = da.read_dataset(args.data)
    result = tr.train(model_cfg, tcfg, samples, args.out)
    print(json.dumps({
        "best_val_rel_l2": result.best_val,
        "best_epoch": result.best_epoch,
        "checkpoint": result.checkpoint_path,
        "log": result.log_path,
    }))
    return 0


def cmd_eval(args):
    import numpy as np

    from . import data as da
    from . import metrics as mx
    from . import model as mdl
    from . import training as tr

    cfg, params, extra = mdl.load_checkpoint(args.checkpoint)
    samples, _manifest = da.read_dataset(args.data)
    in_mean = np.asarray(extra["in_mean"]) if "in_mean" in extra else None
    in_std = np.asarray(extra["in_std"]) if "in_std" in extra else None
    out_scale = np.asarray(extra["out_scale"]) if "out_scale" in extra else None
    _log_config("eval", checkpoint=args.checkpoint, data=args.data,
                report=args.report, n_samples=len(samples),
                seed=extra.get("seed", 0))
    preds = tr.predict(samples, cfg, params, in_mean, in_std,
                       out_scale=out_scale)
    errors = [
        mx.relative_l2(p, np.asarray(s.targets)) for p, s in zip(preds, samples)
    ]
    with open(args.report, "w") as f:
        f.write("sample,rel_l2\n")
        for i, e in enumerate(errors):
            f.write(f"{i},{e!r}\n")
    mean = float(np.mean(errors)) if errors else float("nan")
    print(json.dumps({"mean_rel_l2": mean, "n_samples": len(errors),
                      "report": args.report}))
    return 0


def cmd_gradcheck(args):
    from . import training as tr

    seed = _resolve(args, "seed", 0)
    _log_config("gradcheck", seed=seed)
    report = tr.gradcheck(seed=seed)
    print(json.dumps({
        "passed": report.passed,
        "max_rel_err": report.max_rel_err,
        "worst_param": report.worst_param,
    }))
    return 0 if report.passed else 3


def cmd_bench(args):
    from . import bench

    seed = _resolve(args, "seed", 0)
    spec = bench.SweepSpec(
        n_values=_int_list(args.n),
        k_values=_int_list(args.k),
        q_values=_int_list(args.q),
        f_values=_int_list(args.f),
        head_values=_int_list(args.heads),
        repetitions=args.reps,
        precision=_resolve(args, "precision", "f32"),
        mem_cap_bytes=args.mem_cap_bytes,
    )
    _log_config("bench", n=spec.n_values, k=spec.k_values, q=spec.q_values,
                f=spec.f_values, heads=spec.head_values, reps=spec.repetitions,
                csv=args.csv, seed=seed)
    rows = bench.run_sweep(spec, args.csv, seed=seed)
    skipped = sum(1 for r in rows if r["status"] == "skipped")
    print(json.dumps({"rows": len(rows), "skipped": skipped, "csv": args.csv}))
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="mspt", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed")
    parser.add_argument("--precision", choices=("f32", "f64"), default=None,
                        help="floating-point width for computation")
    parser.add_argument("--threads", type=int, default=None,
                        help="kernel thread count (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("partition",
                       help="order points with a ball tree and emit the patch layout")
    p.add_argument("--coords", required=True, help="point coordinates (.npy or .csv)")
    p.add_argument("--patches", type=int, required=True, help="number of patches K")
    p.add_argument("--leaf-capacity", type=int, default=None)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--task", choices=("darcy", "pointcloud"), required=True)
    p.add_argument("--n-samples", type=int, required=True)
    p.add_argument("--grid", default=None, help="HxW for grid tasks")
    p.add_argument("--points", type=int, default=None, help="point count for cloud tasks")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="JSON with model and train sections")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval",
                       help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="per-sample CSV destination")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the tape gradients")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="run a cost sweep")
    p.add_argument("--n", required=True, help="comma-separated point counts")
    p.add_argument("--k", required=True, help="comma-separated patch counts")
    p.add_argument("--q", default="1")
    p.add_argument("--f", default="64")
    p.add_argument("--heads", default="4")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--mem-cap-bytes", type=int, default=None)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mspt: error: {e}", file=sys.stderr)
        return 1

    if args.threads is not None:
        if args.threads < 1:
            print("mspt: error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(args.threads)

    from .errors import ConfigError, DataFormatError, GenerationError, NumericError, ShapeError

    try:
        return args.func(args)
    except UsageError as e:
        print(f"mspt: error: {e}", file=sys.stderr)
        return 1
    except (DataFormatError, GenerationError, ConfigError, ShapeError) as e:
        print(f"mspt: error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"mspt: numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

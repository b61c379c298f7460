"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, neural
from .baselines import BaselineKind, BaselineMethod, estimate_cloud
from .errors import DataError, NumericError
from .geometry import KdIndex, unoriented_errors_deg
from .inference import InferConfig, estimate_normals
from .pipeline import TrainConfig, train
from .xyz import read_xyz, write_columns, write_xyz

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


def _add_infer_flags(p):
    d = InferConfig()
    p.add_argument("--k", type=int, default=64, help="patch size (must match training)")
    p.add_argument("--m", type=int, default=d.m, help="coarse sphere samples")
    p.add_argument("--l", type=int, default=d.l, help="coarse candidates kept")
    p.add_argument("--refine-steps", type=int, default=d.refine_steps)
    p.add_argument("--refine-lr", type=float, default=d.refine_lr)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--select", choices=("mean", "min"), default=d.select,
                   help="average refined candidates or keep the lowest-offset one")
    p.add_argument("--no-coarse", action="store_true",
                   help="refine random vectors instead of coarse predictions")
    p.add_argument("--threads", type=int, default=1)


def _infer_config(args) -> InferConfig:
    return InferConfig(m=args.m, l=args.l, refine_steps=args.refine_steps,
                       refine_lr=args.refine_lr, seed=args.seed,
                       select=args.select, coarse=not args.no_coarse)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anglefield", description="Neural angle field normal estimation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic labelled cloud")
    p.add_argument("--shape", required=True, choices=[k.value for k in bench.ShapeKind])
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--noise", type=float, default=0.0,
                   help="noise std as a fraction of the bounding-box diagonal")
    p.add_argument("--density", default="uniform", choices=[d.value for d in bench.Density])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="shape parameter such as radius=1.5")
    p.add_argument("-o", "--output", required=True)

    d = TrainConfig()
    p = sub.add_parser("train", help="train an angle field")
    p.add_argument("inputs", nargs="+", help="6-field XYZ training clouds")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.add_argument("--k", type=int, default=d.k)
    p.add_argument("--M", type=int, default=d.M, help="training query pool size")
    p.add_argument("--batch-queries", type=int, default=d.batch_queries)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--warmup-steps", type=int, default=d.warmup_steps)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--cap", type=int, default=None, help="patches per cloud")
    p.add_argument("--log", default=None, help="CSV loss log (default: beside checkpoint)")
    p.add_argument("--epoch-checkpoints", action="store_true")

    p = sub.add_parser("predict", help="estimate normals with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--errors", default=None,
                   help="also write x y z err_degrees (input must carry normals)")
    _add_infer_flags(p)

    p = sub.add_parser("baseline", help="PCA or jet normals")
    p.add_argument("method", choices=[k.value for k in BaselineKind])
    p.add_argument("--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--k", type=int, default=64)

    p = sub.add_parser("eval", help="unoriented RMSE of predicted normals")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--subsample", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None, help="write per-point errors as CSV")

    p = sub.add_parser("bench", help="RMSE table over a synthetic suite")
    p.add_argument("suite", help="one ShapeSpec per line, key=value tokens")
    p.add_argument("--model", default=None, help="omit to tabulate baselines only")
    p.add_argument("--baseline-k", type=int, default=None)
    p.add_argument("--subsample", type=int, default=5000)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    _add_infer_flags(p)
    return parser


def _cmd_synth(args):
    params = {}
    for item in args.param:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--param expects KEY=VALUE, got {item!r}")
        params[key] = float(value)
    try:
        spec = bench.ShapeSpec(args.shape, args.points, args.noise, args.density,
                               args.seed, params)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cloud = bench.synth_cloud(spec)
    write_xyz(args.output, cloud.points, cloud.normals)


def _cmd_train(args):
    try:
        cfg = TrainConfig(k=args.k, M=args.M, batch_queries=args.batch_queries,
                          epochs=args.epochs, lr=args.lr, warmup_steps=args.warmup_steps,
                          seed=args.seed, cap=args.cap)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    clouds = [read_xyz(p) for p in args.inputs]
    out = Path(args.output)
    _, trace = train(clouds, cfg, checkpoint=out, epoch_checkpoints=args.epoch_checkpoints)
    trace.write_csv(args.log or out.with_suffix(".csv"))
    (out.parent / "run.cfg").write_text(cfg.to_text())
    print(f"trained {len(trace.steps)} steps, final epoch loss {trace.epoch_losses[-1]:.5f}")


def _cmd_predict(args):
    try:
        cfg = _infer_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = neural.load_model(args.model)
    cloud = read_xyz(args.input)
    if args.errors and not cloud.has_normals:
        raise DataError("--errors needs ground-truth normals in the input")
    pred = estimate_normals(model, cloud, args.k, cfg, index=KdIndex(cloud.points),
                            threads=args.threads)
    write_xyz(args.output, cloud.points, pred)
    if args.errors:
        err = unoriented_errors_deg(pred, cloud.normals)
        write_columns(args.errors, np.column_stack([cloud.points, err]))


def _cmd_baseline(args):
    try:
        method = BaselineMethod(BaselineKind(args.method), args.k)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cloud = read_xyz(args.input)
    write_xyz(args.output, cloud.points, estimate_cloud(method, cloud))


def _cmd_eval(args):
    pred, gt = read_xyz(args.pred), read_xyz(args.gt)
    err, idx = bench.evaluate_clouds(pred, gt, args.subsample, args.seed)
    report = bench.EvalReport([args.pred], [float(np.sqrt(np.mean(err ** 2)))], [err])
    print(report.format())
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("index,err_degrees\n")
            fh.writelines(f"{i},{e!r}\n" for i, e in zip(idx, err.tolist()))


def _cmd_bench(args):
    try:
        suite = bench.read_suite(args.suite)
        cfg = _infer_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = neural.load_model(args.model) if args.model else None
    table = bench.run_benchmark(model, suite, cfg, k=args.k, baseline_k=args.baseline_k,
                                subsample=args.subsample, eval_seed=args.eval_seed,
                                threads=args.threads)
    print(table.format())
    if args.csv:
        Path(args.csv).write_text(table.to_csv())


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "predict": _cmd_predict,
            "baseline": _cmd_baseline, "eval": _cmd_eval, "bench": _cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

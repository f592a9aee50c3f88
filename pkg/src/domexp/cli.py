"""Command-line entry point: ``domexp <command> [--config PATH] [--seed N] [--output-dir DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import datagen
from .config import ExpansionConfig, load_config
from .errors import DomexpError
from .experiment import (
    Run,
    forgetting_curve,
    run_expansion_experiment,
    sweep_lambda,
    write_report_csv,
)
from .regularizers import RegWeights
from .trainer import METHODS, write_epoch_log_csv


def _config(args) -> ExpansionConfig:
    cfg = load_config(args.config) if args.config else ExpansionConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=str(args.output_dir))
    return cfg


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    run = Run(cfg)
    out = Path(args.dest) if args.dest else run.dir / "data"
    for tag, parts in (("original", run.domains.original), ("new", run.domains.new)):
        for name, ds in zip(("train", "dev", "eval"), parts):
            path = datagen.save_feature_file(ds, out / f"{tag}_{name}.csv")
            print(path)
    return 0


def cmd_train_original(args) -> int:
    run = Run(_config(args))
    model = run.original
    print(f"{run.dir / 'original.npz'}  ({len(model)} parameters)")
    return 0


def cmd_expand(args) -> int:
    run = Run(_config(args))
    reg = RegWeights(args.lambda_w, args.lambda_e, args.lambda_s, args.temperature)
    _, logs = run.expand(args.method, reg)
    path = write_epoch_log_csv(logs, Path(args.log) if args.log else
                               run.dir / f"expand_{args.method}.csv")
    last = logs[-1].errors
    print(f"eval org {100 * last['eval_org']:.2f}%  new {100 * last['eval_new']:.2f}%  log: {path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    grid = [float(v) for v in args.grid.split(",")] if args.grid else None
    curve = sweep_lambda(cfg, args.method, grid)
    for lam, org, new in curve.points:
        print(f"{lam:g}\t{100 * org:.2f}\t{100 * new:.2f}")
    return 0


def cmd_forgetting_curve(args) -> int:
    curves = forgetting_curve(_config(args), tuple(args.methods))
    for method, rows in curves.items():
        epoch, org, new, _ = rows[-1]
        print(f"{method}: epoch {epoch} org {100 * org:.2f}% new {100 * new:.2f}%")
    return 0


def cmd_report(args) -> int:
    cfg = _config(args)
    reports = run_expansion_experiment(cfg)
    path = write_report_csv(reports, cfg.run_dir() / "report.csv")
    print(path.read_text(encoding="utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file (defaults to the synthetic task)")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--output-dir", type=Path, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="domexp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", parents=[common], help="write the synthetic splits as CSV")
    g.add_argument("--dest", help="directory for the CSV files (default: <run dir>/data)")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train-original", parents=[common], help="train and cache the original model")
    t.set_defaults(func=cmd_train_original)

    e = sub.add_parser("expand", parents=[common], help="adapt to the new domain with one method")
    e.add_argument("--method", choices=METHODS, required=True)
    e.add_argument("--lambda-w", type=float, default=0.0)
    e.add_argument("--lambda-e", type=float, default=0.0)
    e.add_argument("--lambda-s", type=float, default=0.0)
    e.add_argument("--temperature", type=float, default=1.0)
    e.add_argument("--log", help="per-epoch CSV path")
    e.set_defaults(func=cmd_expand)

    s = sub.add_parser("sweep", parents=[common], help="eval errors across one method's weight grid")
    s.add_argument("--method", choices=[m for m in METHODS if m != "fine-tune"], required=True)
    s.add_argument("--grid", help="comma-separated weights (default: the configured grid)")
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("forgetting-curve", parents=[common], help="per-epoch errors while adapting")
    f.add_argument("--methods", nargs="+", default=["fine-tune", "SKLD"], choices=METHODS)
    f.set_defaults(func=cmd_forgetting_curve)

    r = sub.add_parser("report", parents=[common], help="tune every method and write report.csv")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DomexpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

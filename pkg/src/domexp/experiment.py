"""Experiment harness: method comparison report, lambda sweeps, forgetting curves.

All artifacts for one (config, seed) pair live under ``config.run_dir()``.
Original-model training, the Fisher diagonal and soft targets are cached
there, so repeated sweeps over the same config reuse them.
"""

from __future__ import annotations

import csv
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from decimal import ROUND_DOWN, Decimal
from pathlib import Path

import numpy as np

from . import datagen
from .config import ExpansionConfig, dump_config
from .datagen import Dataset
from .errors import ConfigError
from .net import NetConfig, ParamVector, load_checkpoint, save_checkpoint
from .regularizers import (
    FisherDiagonal,
    RegWeights,
    SoftTargets,
    estimate_fisher_diagonal,
    precompute_soft_targets,
)
from .trainer import EpochLog, evaluate, expand_domain, train_original, write_epoch_log_csv

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["method", "lambda_w", "lambda_e", "lambda_s", "temperature",
                  "org_error", "new_error", "avg_error", "rel_mc"]


@dataclass(frozen=True)
class MethodReport:
    method: str
    org_error: float
    new_error: float
    rel_mc: float | None = None
    reg: RegWeights | None = None

    @property
    def avg_error(self) -> float:
        return (self.org_error + self.new_error) / 2


@dataclass(frozen=True)
class TradeoffCurve:
    method: str
    points: list[tuple[float, float, float]]  # (lambda, org_error, new_error), sorted by lambda


@dataclass(frozen=True)
class Domains:
    original: tuple[Dataset, Dataset, Dataset]
    new: tuple[Dataset, Dataset, Dataset]

    @property
    def net_config_args(self) -> tuple[int, int]:
        tr = self.original[0]
        return tr.feature_dim, tr.num_classes


def truncate(value: float, decimals: int = 2) -> float:
    """Cut ``value`` toward zero at ``decimals`` places (after removing float noise)."""
    q = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(round(value, 9))).quantize(q, rounding=ROUND_DOWN))


def rel_mc(avg_method: float, avg_mc: float, decimals: int | None = 2) -> float:
    """Relative increase (percent) of a method's average error over multi-condition.

    Truncated toward zero at ``decimals`` places; pass ``None`` for the raw value.
    """
    if not avg_mc > 0:
        raise ValueError(f"multi-condition average error must be > 0, got {avg_mc}")
    raw = 100.0 * (avg_method - avg_mc) / avg_mc
    return raw if decimals is None else truncate(raw, decimals)


# -- data and shared artifacts ------------------------------------------------


def build_domains(cfg: ExpansionConfig) -> Domains:
    if cfg.files is not None:
        f = cfg.files
        load = lambda p, tag: datagen.load_feature_file(  # noqa: E731
            p, f.num_classes, stack_context=f.stack_context, domain_tag=tag)
        return Domains(
            (load(f.original_train, "original"), load(f.original_dev, "original"),
             load(f.original_eval, "original")),
            (load(f.new_train, "new"), load(f.new_dev, "new"), load(f.new_eval, "new")),
        )
    parts = []
    for spec in (cfg.original_domain, cfg.new_domain):
        # the run seed perturbs the shared layout seed, so seeds give different tasks
        spec = replace(spec, seed=spec.seed + cfg.seed)
        parts.append(tuple(datagen.split(datagen.generate_domain(spec), cfg.split_fractions,
                                         seed=spec.seed)))
    return Domains(*parts)


def net_config(cfg: ExpansionConfig, domains: Domains) -> NetConfig:
    d, C = domains.net_config_args
    return NetConfig(d, cfg.hidden_dims, C)


class Run:
    """Lazily computed, disk-cached shared artifacts of one (config, seed)."""

    def __init__(self, cfg: ExpansionConfig):
        self.cfg = cfg
        self.dir = cfg.run_dir()
        self.domains = build_domains(cfg)
        self.net_config = net_config(cfg, self.domains)
        self._original: ParamVector | None = None
        self._fisher: FisherDiagonal | None = None
        self._soft: dict[float, SoftTargets] = {}

    def prepare(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_path = self.dir / "config.ini"
        if not cfg_path.exists():
            cfg_path.write_text(dump_config(self.cfg), encoding="utf-8")

    @property
    def original(self) -> ParamVector:
        if self._original is None:
            path = self.dir / "original.npz"
            if path.exists():
                self._original, _ = load_checkpoint(path)
            else:
                self.prepare()
                tc = replace(self.cfg.train_original, seed=self.cfg.seed)
                train, dev, _ = self.domains.original
                self._original, logs = train_original(self.net_config, train, dev, tc)
                save_checkpoint(path, self._original, self.cfg.seed)
                write_epoch_log_csv(logs, self.dir / "original_log.csv")
        return self._original

    @property
    def fisher(self) -> FisherDiagonal:
        if self._fisher is None:
            path = self.dir / "fisher.npz"
            if path.exists():
                self._fisher = FisherDiagonal.load(path)
            else:
                self._fisher = estimate_fisher_diagonal(
                    self.original, self.domains.original[0], self.cfg.fisher_offset)
                self._fisher.save(path)
        return self._fisher

    def soft_targets(self, T: float) -> SoftTargets:
        if T not in self._soft:
            path = self.dir / f"soft_targets_T{T:g}.npz"
            if path.exists():
                self._soft[T] = SoftTargets.load(path)
            else:
                self._soft[T] = precompute_soft_targets(self.original, self.domains.new[0].features, T)
                self._soft[T].save(path)
        return self._soft[T]

    def eval_sets(self, which: str) -> dict[str, Dataset]:
        k = {"dev": 1, "eval": 2}[which]
        return {"org": self.domains.original[k], "new": self.domains.new[k]}

    def expand(self, method: str, reg: RegWeights) -> tuple[ParamVector, list[EpochLog]]:
        fisher = self.fisher if method in ("EWC", "SKLD-EWC") else None
        soft = self.soft_targets(reg.temperature) if method in ("SKLD", "SKLD-EWC") else None
        tc = replace(self.cfg.train_expansion, seed=self.cfg.seed)
        both = {**{f"dev_{k}": v for k, v in self.eval_sets("dev").items()},
                **{f"eval_{k}": v for k, v in self.eval_sets("eval").items()}}
        return expand_domain(self.original, self.domains.new[0], method, reg, tc,
                             fisher=fisher, soft_targets=soft, eval_sets=both,
                             t_squared=self.cfg.t_squared)


# -- grids ---------------------------------------------------------------------


def method_grid(cfg: ExpansionConfig, method: str) -> list[RegWeights]:
    g = cfg.grid
    if method == "fine-tune":
        return [RegWeights()]
    if method == "WCA":
        return [RegWeights(lambda_w=w) for w in g.lambda_w]
    if method == "EWC":
        return [RegWeights(lambda_e=e) for e in g.lambda_e]
    if method == "SKLD":
        return [RegWeights(lambda_s=s, temperature=T) for T in g.temperature for s in g.lambda_s]
    if method == "SKLD-EWC":
        return [RegWeights(lambda_s=s, lambda_e=e, temperature=T)
                for T, s, e in itertools.product(g.temperature, g.lambda_s, g.hybrid_lambda_e)]
    raise ConfigError(f"unknown method {method!r}")


def swept_value(method: str, reg: RegWeights) -> float:
    return {"WCA": reg.lambda_w, "EWC": reg.lambda_e}.get(method, reg.lambda_s)


@dataclass(frozen=True)
class GridResult:
    method: str
    reg: RegWeights
    dev: tuple[float, float]
    eval: tuple[float, float]

    @property
    def dev_avg(self) -> float:
        return (self.dev[0] + self.dev[1]) / 2


def _point_in(run: Run, method: str, reg: RegWeights) -> GridResult:
    _, logs = run.expand(method, reg)
    e = logs[-1].errors
    return GridResult(method, reg, (e["dev_org"], e["dev_new"]), (e["eval_org"], e["eval_new"]))


def _run_point(cfg: ExpansionConfig, method: str, reg: RegWeights) -> GridResult:
    # worker entry point: rebuilds the run from its config and reads cached artifacts
    return _point_in(Run(cfg), method, reg)


def run_grid(run: Run, method: str, grid: list[RegWeights]) -> list[GridResult]:
    # make sure shared artifacts exist on disk before any worker needs them
    if method in ("EWC", "SKLD-EWC"):
        run.fisher
    if method in ("SKLD", "SKLD-EWC"):
        for T in sorted({r.temperature for r in grid}):
            run.soft_targets(T)
    run.original
    if run.cfg.jobs > 1 and len(grid) > 1:
        with ProcessPoolExecutor(run.cfg.jobs) as pool:
            return list(pool.map(_run_point, itertools.repeat(run.cfg), itertools.repeat(method), grid))
    return [_point_in(run, method, reg) for reg in grid]


def select_best(results: list[GridResult]) -> GridResult:
    """Lowest mean dev error; ties resolved by grid order."""
    return min(results, key=lambda r: r.dev_avg)


def write_grid_csv(results: list[GridResult], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "lambda_w", "lambda_e", "lambda_s", "temperature",
                    "dev_org_error", "dev_new_error", "eval_org_error", "eval_new_error"])
        for r in results:
            w.writerow([r.method, r.reg.lambda_w, r.reg.lambda_e, r.reg.lambda_s, r.reg.temperature,
                        _pct(r.dev[0]), _pct(r.dev[1]), _pct(r.eval[0]), _pct(r.eval[1])])
    return path


# -- top-level operations ------------------------------------------------------


def _pct(e: float) -> str:
    return f"{100.0 * e:.2f}"


def multi_condition_baseline(original_train: Dataset, new_train: Dataset, net_cfg: NetConfig,
                             train_config, original_dev: Dataset | None = None,
                             new_dev: Dataset | None = None) -> ParamVector:
    """Train from scratch on the pooled training data, early-stopping on the pooled dev data."""
    pooled = datagen.pool(original_train, new_train)
    if original_dev is None or new_dev is None:
        dev = pooled
    else:
        dev = datagen.pool(original_dev, new_dev)
    model, _ = train_original(net_cfg, pooled, dev, train_config)
    return model


def _report_rows(reports: list[MethodReport]) -> list[list[str]]:
    rows = []
    for r in reports:
        reg = r.reg
        lam = ["", "", "", ""] if reg is None else [
            repr(reg.lambda_w), repr(reg.lambda_e), repr(reg.lambda_s), repr(reg.temperature)]
        rows.append([r.method, *lam, _pct(r.org_error), _pct(r.new_error), _pct(r.avg_error),
                     "" if r.rel_mc is None else f"{r.rel_mc:.2f}"])
    return rows


def write_report_csv(reports: list[MethodReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(_report_rows(reports))
    return path


def run_expansion_experiment(cfg: ExpansionConfig) -> list[MethodReport]:
    """Train the original model, tune every method on dev, report eval errors.

    Rows: MC, Original, Fine-Tuned, then each configured method other than
    fine-tune. Writes ``report.csv`` (plus per-method grid CSVs) to the run
    directory; the report is rewritten after every method so partial
    results survive a failure.
    """
    run = Run(cfg)
    run.prepare()
    (o_tr, o_dev, o_ev), (n_tr, n_dev, n_ev) = run.domains.original, run.domains.new

    mc_path = run.dir / "mc.npz"
    if mc_path.exists():
        mc, _ = load_checkpoint(mc_path)
    else:
        mc = multi_condition_baseline(o_tr, n_tr, run.net_config,
                                      replace(cfg.train_original, seed=cfg.seed), o_dev, n_dev)
        save_checkpoint(mc_path, mc, cfg.seed)
    mc_avg = (evaluate(mc, o_ev) + evaluate(mc, n_ev)) / 2

    def report(name, org, new, reg=None):
        return MethodReport(name, org, new, rel_mc((org + new) / 2, mc_avg) if mc_avg > 0 else None,
                            reg)

    reports = [
        MethodReport("MC", evaluate(mc, o_ev), evaluate(mc, n_ev), 0.0 if mc_avg > 0 else None),
        report("Original", evaluate(run.original, o_ev), evaluate(run.original, n_ev)),
    ]
    report_path = run.dir / "report.csv"
    methods = ["fine-tune", *[m for m in cfg.methods if m != "fine-tune"]]
    for method in methods:
        results = run_grid(run, method, method_grid(cfg, method))
        if method != "fine-tune":
            write_grid_csv(results, run.dir / f"grid_{method}.csv")
        best = select_best(results)
        name = "Fine-Tuned" if method == "fine-tune" else method
        reports.append(report(name, *best.eval, None if method == "fine-tune" else best.reg))
        write_report_csv(reports, report_path)
        log.info("%s: org %.4f new %.4f (%s)", name, *best.eval, best.reg)
    return reports


def sweep_lambda(cfg: ExpansionConfig, method: str, grid: list[float] | None = None,
                 out_path=None) -> TradeoffCurve:
    """One expansion per value of the method's control weight, eval-set errors.

    ``grid`` overrides the configured grid. For SKLD-EWC the swept weight is
    lambda_s with lambda_e fixed to the first ``hybrid_lambda_e`` entry; for
    SKLD and SKLD-EWC the first configured temperature is used.
    """
    if method == "fine-tune":
        raise ConfigError("fine-tune has no weight to sweep")
    g = cfg.grid
    T = g.temperature[0]
    if grid is None:
        grid = {"WCA": g.lambda_w, "EWC": g.lambda_e}.get(method, g.lambda_s)
    if not grid:
        raise ConfigError("sweep grid must not be empty")
    regs = {
        "WCA": lambda v: RegWeights(lambda_w=v),
        "EWC": lambda v: RegWeights(lambda_e=v),
        "SKLD": lambda v: RegWeights(lambda_s=v, temperature=T),
        "SKLD-EWC": lambda v: RegWeights(lambda_s=v, lambda_e=g.hybrid_lambda_e[0], temperature=T),
    }
    if method not in regs:
        raise ConfigError(f"unknown method {method!r}")
    run = Run(cfg)
    run.prepare()
    values = sorted(float(v) for v in grid)
    results = run_grid(run, method, [regs[method](v) for v in values])
    curve = TradeoffCurve(method, [(v, r.eval[0], r.eval[1]) for v, r in zip(values, results)])
    path = Path(out_path) if out_path else run.dir / f"sweep_{method}.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "lambda", "org_error", "new_error"])
        for v, o, n in curve.points:
            w.writerow([method, repr(v), _pct(o), _pct(n)])
    return curve


def forgetting_curve(cfg: ExpansionConfig, methods=("fine-tune", "SKLD"), out_path=None):
    """Per-epoch eval errors on both domains while adapting.

    SKLD uses ``cfg.forgetting_lambda_s`` or, when unset, the lambda_s (and
    temperature) selected on the dev sets. Returns ``{method: [(epoch, org,
    new, avg), ...]}`` with ``fixed_epochs + 1`` rows per method.
    """
    run = Run(cfg)
    run.prepare()
    curves: dict[str, list[tuple[int, float, float, float]]] = {}
    for method in methods:
        if method == "fine-tune":
            reg = RegWeights()
        elif method in ("SKLD", "SKLD-EWC") and cfg.forgetting_lambda_s is not None:
            reg = RegWeights(lambda_s=cfg.forgetting_lambda_s, temperature=cfg.grid.temperature[0],
                             lambda_e=cfg.grid.hybrid_lambda_e[0] if method == "SKLD-EWC" else 0.0)
        else:
            reg = select_best(run_grid(run, method, method_grid(cfg, method))).reg
        _, logs = run.expand(method, reg)
        curves[method] = [
            (lg.epoch, lg.errors["eval_org"], lg.errors["eval_new"],
             (lg.errors["eval_org"] + lg.errors["eval_new"]) / 2)
            for lg in logs
        ]
    path = Path(out_path) if out_path else run.dir / "forgetting_curve.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "epoch", "org_error", "new_error", "avg_error"])
        for method, rows in curves.items():
            for epoch, o, n, a in rows:
                w.writerow([method, epoch, _pct(o), _pct(n), _pct(a)])
    return curves

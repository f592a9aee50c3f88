"""Acceptance criteria, each checked at its stated tolerance.

The multi-seed checks run the full default synthetic task; expect a few
minutes. Every test records one PASS/FAIL line in the terminal summary.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from helpers import (
    central_difference,
    exact_population_variance,
    oracle_gradients,
    random_batch,
    random_net,
    random_soft,
    relative_error,
)
from scipy.stats import spearmanr

from domexp import numkit
from domexp.config import ExpansionConfig
from domexp.datagen import Dataset
from domexp.experiment import MethodReport, Run, rel_mc, run_expansion_experiment, sweep_lambda, truncate
from domexp.net import NetConfig, init
from domexp.regularizers import (
    FisherDiagonal,
    RegWeights,
    cross_entropy_loss,
    estimate_fisher_diagonal,
    ewc_penalty,
    hybrid_loss,
    skld_loss,
    wca_penalty,
)
from domexp.trainer import evaluate, expand_domain

SEEDS = range(5)
EXPANSIONS = ("Fine-Tuned", "WCA", "EWC", "SKLD", "SKLD-EWC")


def test_gradient_correctness(verdict):
    rng = numkit.make_rng(2024)
    t0 = time.perf_counter()
    worst = {}
    for _ in range(20):
        theta_o = random_net(rng, 1000)
        theta_n = theta_o.with_flat(theta_o.flat + rng.normal(0, 0.2, len(theta_o)))
        x, y = random_batch(rng, theta_n)
        soft = random_soft(rng, x.shape[0], theta_n.config.num_classes)
        fisher = FisherDiagonal(rng.uniform(0, 1, len(theta_o)), offset=float(rng.uniform(0.01, 1)))
        T = float(rng.uniform(0.5, 4))
        reg = RegWeights(lambda_e=float(rng.uniform(0, 2)), lambda_s=float(rng.uniform(0, 1)),
                         temperature=T)
        objectives = {
            "cross-entropy": lambda: cross_entropy_loss(theta_n, x, y),
            "WCA": lambda: wca_penalty(theta_n, theta_o, 0.7),
            "EWC": lambda: ewc_penalty(theta_n, theta_o, fisher, reg.lambda_e),
            "SKLD": lambda: skld_loss(theta_n, x, y, soft, reg.lambda_s, T),
            "hybrid": lambda: hybrid_loss(theta_n, theta_o, x, y, soft, fisher, reg),
        }
        for name, f in objectives.items():
            _, g = f()
            fd = central_difference(lambda: f()[0], theta_n.flat, h=1e-5)
            worst[name] = max(worst.get(name, 0.0), relative_error(g.flat, fd))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    assert verdict("1 gradient correctness (rel err <= 1e-4, < 30 s)", ok, detail)


def test_kl_ce_equivalence(verdict):
    rng = numkit.make_rng(7)
    worst_grad = worst_loss = 0.0
    for _ in range(20):
        params = random_net(rng, 500)
        x, y = random_batch(rng, params)
        soft = random_soft(rng, x.shape[0], params.config.num_classes)
        T = float(rng.uniform(0.5, 5))
        # lambda_s = 1 isolates the distillation term
        ce, g_ce = skld_loss(params, x, y, soft, 1.0, T)
        kl, g_kl = skld_loss(params, x, y, soft, 1.0, T, kl_form=True)
        worst_grad = max(worst_grad, float(np.max(np.abs(g_ce.flat - g_kl.flat))))
        # both terms are batch means, so the per-sample sums differ by sum_i H(s_i)
        B = x.shape[0]
        worst_loss = max(worst_loss, abs((ce - kl) * B - float(numkit.entropy(soft).sum())))
    ok = worst_grad <= 1e-10 and worst_loss <= 1e-9
    assert verdict("2 KL-CE equivalence (grad 1e-10, loss gap = entropy sum 1e-9)", ok,
                   f"max grad diff {worst_grad:.1e}, max loss gap error {worst_loss:.1e}")


def test_fisher_oracle(verdict):
    rng = numkit.make_rng(3)
    params = init(NetConfig(6, (10, 6), 4), rng)
    params.flat += rng.normal(0, 0.1, len(params))
    assert len(params) <= 200
    x, y = rng.normal(size=(50, 6)), rng.integers(0, 4, 50)
    fisher = estimate_fisher_diagonal(params, Dataset(x, y, 4))
    oracle = exact_population_variance(oracle_gradients(params, x, y))
    mismatches = int(np.sum(fisher.values != oracle))
    assert verdict("3 Fisher diagonal equals brute-force oracle exactly", mismatches == 0,
                   f"{len(params)} params, 50 samples, {mismatches} mismatches")


@pytest.fixture(scope="module")
def default_cfg(tmp_path_factory):
    return ExpansionConfig(output_dir=str(tmp_path_factory.mktemp("runs")))


def test_reduction_identities(default_cfg, verdict):
    run = Run(default_cfg)
    new_train = run.domains.new[0]
    tc = replace(default_cfg.train_expansion, seed=0)

    def trajectory(method, reg):
        steps = []
        expand_domain(run.original, new_train, method, reg, tc, fisher=run.fisher,
                      soft_targets=run.soft_targets(reg.temperature),
                      on_step=lambda s, p: steps.append(p.flat.copy()))
        return np.array(steps)

    T = 2.0
    checks = {
        "SKLD(l_s=0) == fine-tune": (trajectory("SKLD", RegWeights(temperature=T)),
                                    trajectory("fine-tune", RegWeights(temperature=T))),
        "hybrid(l_e=0) == SKLD": (trajectory("SKLD-EWC", RegWeights(lambda_s=0.3, temperature=T)),
                                  trajectory("SKLD", RegWeights(lambda_s=0.3, temperature=T))),
        "hybrid(l_s=0) == EWC": (trajectory("SKLD-EWC", RegWeights(lambda_e=100.0, temperature=T)),
                                 trajectory("EWC", RegWeights(lambda_e=100.0, temperature=T))),
    }
    failed = [k for k, (a, b) in checks.items() if not np.array_equal(a, b)]
    steps = len(checks["SKLD(l_s=0) == fine-tune"][0])
    assert verdict("4 reduction identities bit-identical per step", not failed,
                   f"{steps} steps each" + (f"; differ: {failed}" if failed else ""))


def test_forgetting_effect(default_cfg, verdict):
    t0 = time.perf_counter()
    hits, lines = 0, []
    for seed in SEEDS:
        run = Run(default_cfg.with_seed(seed))
        (_, _, o_ev), (_, _, n_ev) = run.domains.original, run.domains.new
        before = evaluate(run.original, o_ev), evaluate(run.original, n_ev)
        _, logs = run.expand("fine-tune", RegWeights())
        after = logs[-1].errors["eval_org"], logs[-1].errors["eval_new"]
        # a zero baseline still needs a real increase
        forgot = after[0] >= 1.5 * before[0] and after[0] > before[0]
        learned = after[1] < before[1]
        hits += forgot and learned
        lines.append(f"s{seed} org {100 * before[0]:.0f}->{100 * after[0]:.0f} "
                     f"new {100 * before[1]:.0f}->{100 * after[1]:.0f}")
    elapsed = time.perf_counter() - t0
    ok = hits >= 4 and elapsed < 120
    assert verdict("5 forgetting effect in >= 4/5 seeds (< 2 min)", ok,
                   f"{hits}/5; {'; '.join(lines)}; {elapsed:.0f}s")


@pytest.fixture(scope="module")
def seed_reports(default_cfg):
    t0 = time.perf_counter()
    reports = {s: {r.method: r for r in run_expansion_experiment(default_cfg.with_seed(s))}
               for s in SEEDS}
    return reports, time.perf_counter() - t0


def _fmt(reports):
    return " ".join(f"{k}={100 * r.avg_error:.1f}" for k, r in reports.items())


def test_mitigation_ordering(seed_reports, verdict):
    reports, elapsed = seed_reports
    ordered = hybrid_ok = 0
    for rep in reports.values():
        a = {k: r.avg_error for k, r in rep.items()}
        ordered += a["SKLD"] < a["EWC"] < a["WCA"] < min(a["Original"], a["Fine-Tuned"])
        hybrid_ok += a["SKLD-EWC"] <= a["SKLD"]
    ok = ordered >= 3 and hybrid_ok >= 3 and elapsed < 15 * 60
    detail = (f"ordering {ordered}/5, SKLD-EWC <= SKLD {hybrid_ok}/5, {elapsed:.0f}s; "
              + " | ".join(f"s{s}: {_fmt(rep)}" for s, rep in reports.items()))
    assert verdict("6 mitigation ordering SKLD < EWC < WCA < min(Original, FT) in >= 3/5", ok, detail)


def test_multi_condition_upper_bound(seed_reports, verdict):
    reports, _ = seed_reports
    hits = sum(rep["MC"].avg_error <= min(rep[m].avg_error for m in EXPANSIONS)
               for rep in reports.values())
    assert verdict("7 multi-condition <= best expansion in >= 4/5 seeds", hits >= 4, f"{hits}/5")


def test_tradeoff_monotonicity(default_cfg, verdict):
    ok, parts = True, []
    for method in ("WCA", "EWC", "SKLD"):
        curve = sweep_lambda(default_cfg, method)
        lam = [p[0] for p in curve.points]
        r_org = spearmanr(lam, [p[1] for p in curve.points])[0]
        r_new = spearmanr(lam, [p[2] for p in curve.points])[0]
        ok &= bool(r_org <= 0 and r_new >= 0)
        parts.append(f"{method} org {r_org:+.2f} new {r_new:+.2f}")
    assert verdict("8 trade-off: rho(lambda, org) <= 0 and rho(lambda, new) >= 0", ok, "; ".join(parts))


def test_table_arithmetic(verdict):
    a = rel_mc(10.03, 9.52)
    b = truncate(rel_mc(15.57, 9.52, decimals=None), 1)
    c = round(MethodReport("x", 8.10, 23.04).avg_error, 2)
    ok = a == 5.35 and b == 63.5 and c == 15.57
    assert verdict("9 rel_mc / avg arithmetic", ok, f"{a}, {b}, {c}")


def test_report_determinism(seed_reports, default_cfg, tmp_path, verdict):
    first = (default_cfg.with_seed(0).run_dir() / "report.csv").read_bytes()
    again = replace(default_cfg, output_dir=str(tmp_path))
    run_expansion_experiment(again)
    second = (again.run_dir() / "report.csv").read_bytes()
    assert verdict("10 report CSV byte-identical across runs", first == second,
                   f"{len(first)} bytes")

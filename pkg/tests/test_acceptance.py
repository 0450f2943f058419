"""Acceptance criteria, each at its stated tolerance.

Every test writes one line ``PASS|FAIL <criterion>: <measurement> [<seconds>]``
to the terminal. Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import filecmp
import time
from dataclasses import replace

import numpy as np
import pytest

from metarm import pipeline
from metarm.cli import main
from metarm.config import ExperimentConfig
from metarm.core import Examples, HyperParams, kl_divergence, logistic, make_rng, softmax
from metarm.hypergrad import CheckConfig, check_hypergrad, prop1_hypergrad, random_instance, run_inner_sgd
from metarm.meta import StoppingRule, meta_test
from metarm.metrics import grad_norm_trace
from metarm.models import RewardParams, TaskInstance, policy_probs
from metarm.objectives import bt_prob, rlhf_objective_table
from metarm.oracle import brute_force_inner_min, optimal_policy, tabular_inner_minimizer
from metarm.synth import gen_pref_data

from conftest import random_tabular

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(request):
    reporter = request.config.pluginmanager.getplugin("terminalreporter")
    start = time.perf_counter()

    def emit(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail} [{time.perf_counter() - start:.1f}s]"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
        return ok

    return emit


def test_hypergradient_correctness(verdict):
    start = time.perf_counter()
    report = check_hypergrad(CheckConfig(), 100, make_rng(0, 300))
    elapsed = time.perf_counter() - start
    ok = report.passed and len(report.rows) >= 100 and elapsed <= 60
    assert verdict("hypergradient vs finite differences", ok,
                   f"{len(report.rows)} instances, max rel err {report.max_rel_error:.2e} <= 1e-5, "
                   f"min cos 1-{1 - report.min_cosine:.1e} >= 1-1e-8, {elapsed:.1f}s <= 60s")


def test_zero_step_nullity(verdict):
    rng = make_rng(0, 301)
    worst = 0.0
    for _ in range(100):
        task, phi, theta0, _, nu, alpha, beta, ridge = random_instance(rng)
        trace = run_inner_sgd(phi, theta0, Examples([], []), alpha, beta, task, ridge)
        worst = max(worst, float(np.max(np.abs(prop1_hypergrad(trace, nu, task).vector))))
    assert verdict("zero inner steps give a zero hypergradient", worst == 0.0,
                   f"max |entry| {worst} over 100 instances")


def test_oracle_equivalence(verdict):
    start = time.perf_counter()
    worst_sgd = worst_brute = 0.0
    for i in range(20):
        rng = make_rng(0, 302, i)
        task = random_tabular(rng, ragged=bool(i % 2))
        phi = RewardParams(rng.normal(size=task.q), r_max=1.0)
        hp = HyperParams(alpha=0.2, beta=float(rng.uniform(1.0, 4.0)))
        target = optimal_policy(task, phi, hp.beta)
        theta = meta_test(phi, task, hp, StoppingRule(max_steps=10_000, patience=500),
                          make_rng(0, 303, i), batch_size=64)
        worst_sgd = max(worst_sgd, float(task.prompt_probs @ kl_divergence(
            target, policy_probs(theta, task), axis=1)))
        closed = policy_probs(tabular_inner_minimizer(task, phi, hp.beta), task)
        brute = policy_probs(brute_force_inner_min(task, phi, hp.beta).theta, task)
        worst_brute = max(worst_brute, float(task.prompt_probs @ kl_divergence(closed, brute, axis=1)))
    elapsed = time.perf_counter() - start
    ok = worst_sgd <= 1e-3 and worst_brute <= 1e-8 and elapsed <= 120
    assert verdict("oracle equivalence on 20 tabular tasks", ok,
                   f"meta-test KL {worst_sgd:.2e} <= 1e-3, closed form vs brute force KL "
                   f"{worst_brute:.2e} <= 1e-8, {elapsed:.1f}s <= 120s")


def test_closed_form_optimality(verdict):
    failures, min_gap = 0, np.inf
    for i in range(20):
        rng = make_rng(0, 304, i)
        task = random_tabular(rng, n_x=4, n_y=5, ragged=bool(i % 2))
        phi = RewardParams(rng.normal(size=task.q), r_max=2.0)
        beta = float(rng.uniform(0.3, 3.0))
        star = optimal_policy(task, phi, beta)
        best = rlhf_objective_table(star, phi, task, beta)
        with np.errstate(divide="ignore"):
            logs = np.log(star)
        for _ in range(1000):
            scale = rng.choice([1e-3, 1e-1, 1.0])
            noisy = softmax(np.where(task.mask, logs + scale * rng.normal(size=logs.shape), -np.inf),
                            axis=1)
            gap = best - rlhf_objective_table(noisy, phi, task, beta)
            min_gap = min(min_gap, gap)
            failures += not gap > 0
    assert verdict("closed-form policy beats 1000 perturbations on 20 instances", failures == 0,
                   f"{failures} perturbations not worse, smallest gap {min_gap:.2e}")


def test_normalizations(verdict):
    rng = make_rng(0, 305)
    row_err = bt_err = sym_err = 0.0
    for i in range(50):
        task = random_tabular(rng, ragged=True)
        phi = RewardParams(rng.normal(size=task.q), r_max=3.0)
        star = optimal_policy(task, phi, float(rng.uniform(0.1, 5.0)))
        scores = rng.normal(scale=10.0, size=(6, 7))
        row_err = max(row_err, np.max(np.abs(star.sum(axis=1) - 1)),
                      np.max(np.abs(softmax(scores, axis=1).sum(axis=1) - 1)))
        theta = rng.normal(scale=2.0, size=task.p)
        for x in range(task.n_prompts):
            y, y2 = rng.choice(task.n_candidates[x], size=2, replace=False)
            bt_err = max(bt_err, abs(bt_prob(theta, x, y, y2, task) + bt_prob(theta, x, y2, y, task) - 1))
        u = rng.normal(scale=20.0, size=100)
        sym_err = max(sym_err, float(np.max(np.abs(logistic(u) + logistic(-u) - 1))))
    ok = row_err <= 1e-12 and bt_err <= 1e-15 and sym_err <= 1e-15
    assert verdict("normalizations", ok,
                   f"row sums {row_err:.1e} <= 1e-12, BT complement {bt_err:.1e} <= 1e-15, "
                   f"logistic symmetry {sym_err:.1e} <= 1e-15")


def test_bt_fidelity(verdict):
    # one prompt with two candidates, so every drawn pair is the probed pair
    n, worst, ok = 100_000, 0.0, True
    for i, gap in enumerate([-3.0, -1.0, -0.2, 0.0, 0.5, 1.5, 4.0]):
        feats = np.array([[[1.0], [0.0]]])
        task = TaskInstance(feats, feats, np.ones((1, 2), int), [1.0], [[0.5, 0.5]],
                            true_weights=[gap])
        prefs = gen_pref_data(task, n, make_rng(0, 306, i))
        rate = float(np.mean(prefs.preferred == 0))
        p = float(logistic(gap))
        z = abs(rate - p) / np.sqrt(p * (1 - p) / n)
        worst, ok = max(worst, z), ok and z <= 3
    assert verdict("Bradley-Terry data fidelity at n=1e5", ok,
                   f"worst deviation {worst:.2f} standard errors <= 3")


def test_ood_trend(verdict):
    start = time.perf_counter()
    cfg = ExperimentConfig(seeds=tuple(range(10)))
    accs = []
    for s in cfg.seeds:
        reports, _ = pipeline.run_seed(cfg, s)
        accs.append({r.method: r.mean_accuracy for r in reports})
    elapsed = time.perf_counter() - start
    mean = {m: float(np.mean([a[m] for a in accs])) for m in cfg.methods}
    wins = sum(a["ours"] >= a["mtrm"] for a in accs)
    ok = (mean["ours"] >= mean["sft"] + 0.05 and mean["ours"] >= mean["hpl"] and wins >= 7
          and elapsed <= 600)
    assert verdict("out-of-distribution ordering, 10 seeds", ok,
                   f"ours {mean['ours']:.4f} vs sft {mean['sft']:.4f} (+{mean['ours'] - mean['sft']:.4f}"
                   f" >= 0.05), hpl {mean['hpl']:.4f}, mtrm {mean['mtrm']:.4f}; ours >= mtrm in "
                   f"{wins}/10 seeds (>= 7), {elapsed:.0f}s <= 600s")


def test_k_trend(verdict):
    cfg = ExperimentConfig(methods=("ours",))
    values = []
    for s in range(5):
        hp = replace(cfg.for_seed(s)[1], outer_steps=2000, ridge=1e-3)
        trained = pipeline.train(cfg, s, pipeline.gen(cfg, s), hp)
        values.append(grad_norm_trace(trained.run.grad_norms, at=[200, 2000])[1])
    at200, at2000 = np.median(values, axis=0)
    assert verdict("running mean of squared hypergradient norms falls with K", at2000 < at200,
                   f"median {at2000:.3e} at K=2000 < {at200:.3e} at K=200 (5 seeds, ridge 1e-3)")


def test_beta_trend(verdict):
    cfg = ExperimentConfig(methods=("ours",))
    medians = []
    for beta in (0.5, 2.0, 8.0):
        accs = []
        for s in range(5):
            hp = replace(cfg.for_seed(s)[1], beta=beta)
            reports, _ = pipeline.run_seed(cfg, s, hp)
            accs.append(reports[0].mean_accuracy)
        medians.append(float(np.median(accs)))
    ok = all(b >= a for a, b in zip(medians, medians[1:]))
    assert verdict("heldout accuracy nondecreasing in beta", ok,
                   "median at beta 0.5, 2, 8: " + ", ".join(f"{m:.4f}" for m in medians))


def test_determinism(verdict, tmp_path):
    for run in ("a", "b"):
        for stage in ("gen", "train", "adapt", "eval", "report"):
            assert main([stage, "--out", str(tmp_path / run)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    same = files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    differing = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    assert verdict("byte-identical reruns", same and not differing,
                   f"{len(files)} files compared, {len(differing)} differ")

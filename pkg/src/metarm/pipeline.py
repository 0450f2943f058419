"""The experiment as four stages: gen -> train -> adapt -> eval.

Each stage exists twice: as a pure in-memory function of (config, seed,
upstream results) and as a file-backed step that reads the upstream stage's
files and writes its own. Because floats round-trip exactly through the
text format, both routes give identical numbers.

Random streams are keyed by (seed, stage, split, task index), so every
task's adaptation is independent of the order in which tasks run.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .core import HyperParams, UsageError, make_rng
from .io import (
    read_examples,
    read_policy,
    read_prefs,
    read_reward,
    read_table,
    read_task,
    write_examples,
    write_policy,
    write_prefs,
    write_reward,
    write_table,
    write_task,
)
from .meta import (
    MetaTrainRun,
    SFTCache,
    baseline_hpl,
    fit_mtrm_reward,
    meta_test,
    meta_train,
    select_rm,
)
from .metrics import RESULT_COLUMNS, EvalReport, EvalRow, evaluate, grad_norm_trace
from .models import RewardParams
from .synth import SPLITS, TaskData, generate_suite, task_id_for

# stream keys, one per stage
_TRAIN, _ADAPT = 100, 200
SWEEP_AXES = {"beta": "beta", "D": "inner_steps", "K": "outer_steps"}


@dataclass(frozen=True)
class TrainResult:
    run: MetaTrainRun | None
    phi_ours: RewardParams | None
    selected: int | None
    phi_mtrm: RewardParams | None


def file_meta(cfg: ExperimentConfig, seed: int, **extra) -> dict:
    return {"config": cfg.to_dict(), "seed": seed, "version": __version__, **extra}


# -- in-memory stages --------------------------------------------------------

def gen(cfg: ExperimentConfig, seed: int) -> dict[str, list[TaskData]]:
    spec, _ = cfg.for_seed(seed)
    return generate_suite(spec)


def train(cfg: ExperimentConfig, seed: int, suite, hp: HyperParams | None = None) -> TrainResult:
    hp = cfg.for_seed(seed)[1] if hp is None else hp
    tasks = suite["train"]
    run = phi_ours = selected = phi_mtrm = None
    if "ours" in cfg.methods:
        sft = SFTCache(cfg.sft.steps, cfg.sft.lr)
        run = meta_train(tasks, hp, cfg.sft.steps, make_rng(seed, _TRAIN), r_max=cfg.r_max,
                         stride=cfg.meta.stride, sft_lr=cfg.sft.lr,
                         outer_batch=cfg.meta.outer_batch, sft=sft)
        if cfg.meta.select == "final":
            selected = len(run.phis) - 1
            phi_ours = run.final
        else:
            phi_ours, selected, _ = select_rm(run, tasks, hp, cfg.stopping, sft,
                                              seed=seed, batch_size=cfg.adapt_batch)
    if "mtrm" in cfg.methods:
        phi_mtrm = fit_mtrm_reward(tasks, cfg.mtrm.steps, cfg.mtrm.lr, cfg.r_max)
    return TrainResult(run, phi_ours, selected, phi_mtrm)


def adapt(cfg: ExperimentConfig, seed: int, suite, trained: TrainResult,
          hp: HyperParams | None = None) -> dict[str, dict[str, dict[str, np.ndarray]]]:
    """policies[split][method][task_id] for every evaluated split."""
    hp = cfg.for_seed(seed)[1] if hp is None else hp
    sft = SFTCache(cfg.sft.steps, cfg.sft.lr)
    out = {}
    for split in cfg.eval_splits:
        s = SPLITS.index(split)
        out[split] = {m: {} for m in cfg.methods}
        for j, td in enumerate(suite[split]):
            theta0 = sft(td)
            tid = td.task.task_id
            for mi, method in enumerate(cfg.methods):
                rng = make_rng(seed, _ADAPT + mi, s, j)
                if method == "sft":
                    theta = theta0
                elif method == "ours":
                    theta = meta_test(trained.phi_ours, td.task, hp, cfg.stopping, rng,
                                      data=td.ft, theta0=theta0, batch_size=cfg.adapt_batch)
                elif method == "mtrm":
                    theta = meta_test(trained.phi_mtrm, td.task, hp, cfg.stopping, rng,
                                      data=td.ft, theta0=theta0, batch_size=cfg.adapt_batch)
                else:
                    theta = baseline_hpl(suite["train"], hp, rng, cfg.hpl.steps, theta0=theta0)
                out[split][method][tid] = theta
    return out


def evaluate_all(cfg: ExperimentConfig, seed: int, suite, policies) -> list[EvalReport]:
    return [evaluate(method, seed, policies[split][method], suite[split])
            for split in cfg.eval_splits for method in cfg.methods]


def run_seed(cfg: ExperimentConfig, seed: int, hp: HyperParams | None = None):
    """The whole pipeline for one seed, in memory. Returns (reports, train result)."""
    suite = gen(cfg, seed)
    trained = train(cfg, seed, suite, hp)
    policies = adapt(cfg, seed, suite, trained, hp)
    return evaluate_all(cfg, seed, suite, policies), trained


def map_seeds(fn, cfg: ExperimentConfig, seeds, *args):
    """``fn(cfg, seed, *args)`` for every seed, in seed order, optionally in a process pool."""
    seeds = list(seeds)
    if cfg.workers == 1 or len(seeds) == 1:
        return [fn(cfg, s, *args) for s in seeds]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(fn, [cfg] * len(seeds), seeds, *[[a] * len(seeds) for a in args]))


# -- file-backed stages ------------------------------------------------------

def seed_dir(root, stage: str, seed: int) -> Path:
    return Path(root) / stage / f"seed_{seed}"


def write_data(cfg: ExperimentConfig, seed: int, root) -> list[Path]:
    suite = gen(cfg, seed)
    base = seed_dir(root, "data", seed)
    meta = file_meta(cfg, seed)
    written = []
    for split in SPLITS:
        for td in suite[split]:
            tid = td.task.task_id
            written.append(write_task(base / f"{tid}.task.tsv", td.task, meta))
            written.append(write_examples(base / f"{tid}.ft.tsv", td.ft, meta))
            written.append(write_prefs(base / f"{tid}.pref.tsv", td.pref, meta))
    return written


def read_data(cfg: ExperimentConfig, seed: int, root) -> dict[str, list[TaskData]]:
    base = seed_dir(root, "data", seed)
    spec, _ = cfg.for_seed(seed)
    counts = {"train": spec.n_train_tasks, "heldout": spec.n_heldout_tasks}
    suite = {}
    for split in SPLITS:
        suite[split] = []
        for i in range(counts[split]):
            tid = task_id_for(split, i)
            task = read_task(base / f"{tid}.task.tsv")
            suite[split].append(TaskData(task, read_examples(base / f"{tid}.ft.tsv"),
                                         read_prefs(base / f"{tid}.pref.tsv")))
    return suite


RUN_COLUMNS = ("k", "task", "outer_loss", "grad_norm")


def write_train(cfg: ExperimentConfig, seed: int, root) -> list[Path]:
    trained = train(cfg, seed, read_data(cfg, seed, root))
    base = seed_dir(root, "train", seed)
    meta = file_meta(cfg, seed)
    written = []
    if trained.run is not None:
        run = trained.run
        rows = zip(range(len(run.task_ids)), run.task_ids, run.outer_losses, run.grad_norms)
        written.append(write_table(base / "ours.run.tsv", "run", RUN_COLUMNS, rows, meta))
        q = run.phis.shape[1]
        rows = ([int(k), *phi] for k, phi in zip(run.phi_steps, run.phis))
        written.append(write_table(base / "ours.trajectory.tsv", "trajectory",
                                   ["k"] + [f"phi_{i}" for i in range(q)], rows, meta))
        written.append(write_reward(base / "ours.reward.tsv", trained.phi_ours,
                                    {**meta, "selected_k": int(run.phi_steps[trained.selected])}))
    if trained.phi_mtrm is not None:
        written.append(write_reward(base / "mtrm.reward.tsv", trained.phi_mtrm, meta))
    return written


def read_train(cfg: ExperimentConfig, seed: int, root) -> TrainResult:
    base = seed_dir(root, "train", seed)
    run = phi_ours = phi_mtrm = None
    if "ours" in cfg.methods:
        phi_ours = read_reward(base / "ours.reward.tsv")
        run = read_run(base / "ours.run.tsv", phi_ours.r_max, seed)
    if "mtrm" in cfg.methods:
        phi_mtrm = read_reward(base / "mtrm.reward.tsv")
    return TrainResult(run, phi_ours, None, phi_mtrm)


def read_run(path, r_max: float, seed: int) -> MetaTrainRun:
    """Per-iteration records only; the stored trajectory lives in its own file."""
    meta, _, rows = read_table(path, "run")
    return MetaTrainRun(np.zeros(0, dtype=np.int64), np.zeros((0, 0)), [r[1] for r in rows],
                        np.array([float(r[2]) for r in rows]),
                        np.array([float(r[3]) for r in rows]), r_max, meta.get("config", {}), seed)


def write_adapt(cfg: ExperimentConfig, seed: int, root) -> list[Path]:
    suite = read_data(cfg, seed, root)
    policies = adapt(cfg, seed, suite, read_train(cfg, seed, root))
    base = seed_dir(root, "adapt", seed)
    written = []
    for split, by_method in policies.items():
        for method, by_task in by_method.items():
            for tid, theta in by_task.items():
                meta = file_meta(cfg, seed, method=method, task=tid, split=split)
                written.append(write_policy(base / method / f"{tid}.policy.tsv", theta, meta))
    return written


def read_adapt(cfg: ExperimentConfig, seed: int, root, suite):
    base = seed_dir(root, "adapt", seed)
    return {split: {m: {td.task.task_id: read_policy(base / m / f"{td.task.task_id}.policy.tsv")
                        for td in suite[split]} for m in cfg.methods}
            for split in cfg.eval_splits}


def eval_rows(cfg: ExperimentConfig, seed: int, root) -> list[EvalRow]:
    suite = read_data(cfg, seed, root)
    reports = evaluate_all(cfg, seed, suite, read_adapt(cfg, seed, root, suite))
    return [row for rep in reports for row in rep.rows]


def write_eval(cfg: ExperimentConfig, seeds, root) -> Path:
    rows = [row for part in map_seeds(eval_rows, cfg, seeds, str(root)) for row in part]
    meta = file_meta(cfg, list(seeds))
    return write_table(Path(root) / "eval" / "results.tsv", "results", RESULT_COLUMNS,
                       (r.as_tuple() for r in rows), meta)


def read_results(path) -> list[EvalRow]:
    _, _, rows = read_table(path, "results")
    return [EvalRow(r[0], r[1], r[2], int(r[3]), int(r[4]), float(r[5]), float(r[6]))
            for r in rows]


# -- summaries ---------------------------------------------------------------

SUMMARY_COLUMNS = ("method", "split", "n_seeds", "n_tasks", "pl_accuracy_mean",
                   "pl_accuracy_sd", "true_reward_mean")
PER_SEED_COLUMNS = ("method", "split", "seed", "pl_accuracy", "true_reward")


def per_seed_means(rows: list[EvalRow]) -> list[tuple]:
    keys = sorted({(r.method, r.split, r.seed) for r in rows})
    out = []
    for method, split, seed in keys:
        sel = [r for r in rows if (r.method, r.split, r.seed) == (method, split, seed)]
        out.append((method, split, seed, float(np.mean([r.pl_accuracy for r in sel])),
                    float(np.mean([r.true_reward for r in sel]))))
    return out


def summarize(rows: list[EvalRow]) -> list[tuple]:
    seeds = per_seed_means(rows)
    out = []
    for method, split in sorted({(r[0], r[1]) for r in seeds}):
        sel = [r for r in seeds if (r[0], r[1]) == (method, split)]
        acc = np.array([r[3] for r in sel])
        n_tasks = len({r.task for r in rows if (r.method, r.split) == (method, split)})
        out.append((method, split, len(sel), n_tasks, float(acc.mean()),
                    float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
                    float(np.mean([r[4] for r in sel]))))
    return out


TRACE_COLUMNS = ("seed", "k", "mean_sq_grad_norm")


def trace_rows(runs: dict[int, MetaTrainRun], stride: int):
    for seed, run in sorted(runs.items()):
        if len(run.grad_norms) == 0:
            continue
        ks, values = grad_norm_trace(run.grad_norms, stride=min(stride, len(run.grad_norms)))
        for k, v in zip(ks, values):
            yield seed, int(k), float(v)


def write_report(cfg: ExperimentConfig, seeds, root) -> list[Path]:
    root = Path(root)
    rows = read_results(root / "eval" / "results.tsv")
    meta = file_meta(cfg, list(seeds))
    out = root / "report"
    written = [
        write_table(out / "summary.tsv", "summary", SUMMARY_COLUMNS, summarize(rows), meta),
        write_table(out / "per_seed.tsv", "per_seed", PER_SEED_COLUMNS, per_seed_means(rows), meta),
    ]
    if "ours" in cfg.methods:
        runs = {s: read_run(seed_dir(root, "train", s) / "ours.run.tsv", cfg.r_max, s)
                for s in seeds}
        written.append(write_table(out / "grad_trace.tsv", "grad_trace", TRACE_COLUMNS,
                                   trace_rows(runs, cfg.meta.stride), meta))
    return written


# -- sweeps ------------------------------------------------------------------

SWEEP_COLUMNS = ("axis", "axis_value", "seed", "method", "split", "metric", "value")


def parse_axis_values(axis: str, values) -> list:
    if axis not in SWEEP_AXES:
        raise UsageError(f"sweep axis must be one of {list(SWEEP_AXES)}, got {axis!r}")
    parsed = []
    for v in values:
        try:
            parsed.append(float(v) if axis == "beta" else int(v))
        except ValueError:
            raise UsageError(f"bad value {v!r} for axis {axis}") from None
    if not parsed:
        raise UsageError("sweep needs at least one value")
    return parsed


def _sweep_seed(cfg: ExperimentConfig, seed: int, axis: str, values):
    suite = gen(cfg, seed)
    rows = []
    for value in values:
        hp = replace(cfg.for_seed(seed)[1], **{SWEEP_AXES[axis]: value})
        trained = train(cfg, seed, suite, hp)
        reports = evaluate_all(cfg, seed, suite, adapt(cfg, seed, suite, trained, hp))
        for rep in reports:
            split = rep.rows[0].split
            rows.append((axis, value, seed, rep.method, split, "pl_accuracy", rep.mean_accuracy))
            rows.append((axis, value, seed, rep.method, split, "true_reward",
                         rep.mean_true_reward))
        if trained.run is not None and len(trained.run.grad_norms):
            _, final = grad_norm_trace(trained.run.grad_norms, at=[len(trained.run.grad_norms)])
            rows.append((axis, value, seed, "ours", "train", "mean_sq_grad_norm", float(final[0])))
    return rows


def sweep(cfg: ExperimentConfig, seeds, axis: str, values) -> list[tuple]:
    """Long-format rows, one per (value, seed, method, split, metric)."""
    values = parse_axis_values(axis, values)
    for v in values:
        replace(cfg.hp, **{SWEEP_AXES[axis]: v})  # validates the value
    parts = map_seeds(_sweep_seed, cfg, seeds, axis, values)
    rows = [r for part in parts for r in part]
    return sorted(rows, key=lambda r: (values.index(r[1]), r[2]))

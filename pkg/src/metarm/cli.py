"""Command-line harness: metarm {gen,train,adapt,eval,checkgrad,sweep,report}.

Stages read the previous stage's files under --out and write their own:

    data/seed_<s>/<task>.{task,ft,pref}.tsv      gen
    train/seed_<s>/ours.{run,trajectory,reward}.tsv, mtrm.reward.tsv   train
    adapt/seed_<s>/<method>/<task>.policy.tsv    adapt
    eval/results.tsv                             eval
    report/{summary,per_seed,grad_trace}.tsv     report
    sweep/<axis>.tsv                             sweep
    checkgrad.tsv                                checkgrad

eval/results.tsv columns, in order: method, task, split, seed, n_pairs,
pl_accuracy, true_reward.

Every file starts with a JSON header carrying the config echo, the seed and
the package version. Exit codes: 0 success, 1 usage or configuration
error, 2 gradient check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, pipeline
from .config import METHODS, ExperimentConfig, load_config
from .core import UsageError, make_rng
from .hypergrad import check_hypergrad
from .io import write_table

log = logging.getLogger("metarm")

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2


def _split_list(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(t) for t in _split_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers: {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("seeds must be non-negative integers")
    return seeds


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None):
        overrides["seeds"] = tuple(args.seed)
    if getattr(args, "method", None):
        overrides["methods"] = tuple(_split_list(args.method))
    return replace(cfg, **overrides) if overrides else cfg


def cmd_gen(cfg: ExperimentConfig, out: Path) -> int:
    for s in cfg.seeds:
        files = pipeline.write_data(cfg, s, out)
        log.info("seed %d: wrote %d data files", s, len(files))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    for s, files in zip(cfg.seeds, pipeline.map_seeds(pipeline.write_train, cfg, cfg.seeds, str(out))):
        log.info("seed %d: wrote %s", s, ", ".join(p.name for p in files))
    return EXIT_OK


def cmd_adapt(cfg: ExperimentConfig, out: Path) -> int:
    for s, files in zip(cfg.seeds, pipeline.map_seeds(pipeline.write_adapt, cfg, cfg.seeds, str(out))):
        log.info("seed %d: wrote %d policies", s, len(files))
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, out: Path) -> int:
    path = pipeline.write_eval(cfg, cfg.seeds, out)
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, out: Path) -> int:
    files = pipeline.write_report(cfg, cfg.seeds, out)
    rows = pipeline.summarize(pipeline.read_results(out / "eval" / "results.tsv"))
    print(f"{'method':<6} {'split':<8} {'seeds':>5} {'pl_acc':>8} {'sd':>7} {'reward':>8}")
    for method, split, n_seeds, _, acc, sd, reward in rows:
        print(f"{method:<6} {split:<8} {n_seeds:>5} {acc:>8.4f} {sd:>7.4f} {reward:>8.4f}")
    log.info("wrote %s", ", ".join(str(p) for p in files))
    return EXIT_OK


def cmd_checkgrad(cfg: ExperimentConfig, out: Path | None, tol: float | None) -> int:
    check = cfg.checkgrad if tol is None else replace(cfg.checkgrad, rel_tol=tol)
    report = check_hypergrad(check, cfg.checkgrad_instances, make_rng(cfg.seeds[0], 300))
    columns = ("instance", "p", "q", "steps", "alpha", "beta", "ridge", "analytic_norm",
               "rel_error", "cosine", "passed")
    rows = [tuple(getattr(r, c) for c in columns) for r in report.rows]
    print(f"{'#':>4} {'p':>3} {'q':>3} {'D':>3} {'rel_err':>10} {'1-cos':>10}  ok")
    for r in report.rows:
        print(f"{r.instance:>4} {r.p:>3} {r.q:>3} {r.steps:>3} {r.rel_error:>10.2e} "
              f"{1.0 - r.cosine:>10.2e}  {'yes' if r.passed else 'NO'}")
    print(f"max relative error {report.max_rel_error:.3e} (tol {check.rel_tol:.1e}); "
          f"min cosine {report.min_cosine:.12f} (tol 1-{check.cos_tol:.1e}); "
          f"{'PASS' if report.passed else 'FAIL'}")
    if out is not None:
        meta = pipeline.file_meta(cfg, cfg.seeds[0], max_rel_error=report.max_rel_error,
                                  min_cosine=report.min_cosine, passed=report.passed)
        write_table(out / "checkgrad.tsv", "checkgrad", columns, rows, meta)
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_sweep(cfg: ExperimentConfig, out: Path, axis: str, values) -> int:
    rows = pipeline.sweep(cfg, cfg.seeds, axis, values)
    meta = pipeline.file_meta(cfg, list(cfg.seeds), axis=axis,
                              values=pipeline.parse_axis_values(axis, values))
    path = write_table(out / "sweep" / f"{axis}.tsv", "sweep", pipeline.SWEEP_COLUMNS, rows, meta)
    log.info("wrote %s (%d rows)", path, len(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metarm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"metarm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="YAML experiment config")
        p.add_argument("--seed", type=_seeds, default=None,
                       help="seed list, e.g. '0,1,2' (overrides config seeds)")
        p.add_argument("--out", type=Path, required=out_required, default=None,
                       help="output root directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("gen", "generate tasks and datasets")
    for name, text in (("train", "meta-train the reward model and fit baseline rewards"),
                       ("adapt", "adapt a policy per evaluation task and method"),
                       ("eval", "score adapted policies into eval/results.tsv")):
        p = add(name, text)
        p.add_argument("--method", default=None,
                       help=f"comma-separated subset of {','.join(METHODS)}")
    p = add("report", "summary tables from eval results and training runs")
    p.add_argument("--method", default=None)
    p = add("checkgrad", "analytic hypergradient against finite differences", out_required=False)
    p.add_argument("--tol", type=float, default=None, help="relative error tolerance")
    p = add("sweep", "rerun the pipeline over one hyperparameter axis")
    p.add_argument("--method", default=None)
    p.add_argument("--axis", required=True, choices=sorted(pipeline.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        out = args.out
        if args.command == "gen":
            return cmd_gen(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "adapt":
            return cmd_adapt(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "report":
            return cmd_report(cfg, out)
        if args.command == "checkgrad":
            return cmd_checkgrad(cfg, out, args.tol)
        return cmd_sweep(cfg, out, args.axis, _split_list(args.values))
    except (UsageError, FileNotFoundError, PermissionError, IsADirectoryError,
            NotADirectoryError) as exc:
        print(f"metarm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

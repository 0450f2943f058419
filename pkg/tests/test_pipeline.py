from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from metarm import pipeline
from metarm.config import load_config
from metarm.core import UsageError
from metarm.io import read_table

TINY = Path(__file__).parent / "data" / "tiny.yaml"


@pytest.fixture(scope="module")
def cfg():
    return load_config(TINY)


@pytest.fixture(scope="module")
def staged(cfg, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    for s in cfg.seeds:
        pipeline.write_data(cfg, s, root)
    for s in cfg.seeds:
        pipeline.write_train(cfg, s, root)
        pipeline.write_adapt(cfg, s, root)
    pipeline.write_eval(cfg, cfg.seeds, root)
    pipeline.write_report(cfg, cfg.seeds, root)
    return root


class TestInMemory:
    def test_reports_cover_methods_and_splits(self, cfg):
        reports, trained = pipeline.run_seed(cfg, 0)
        assert [(r.method, r.rows[0].split) for r in reports] == [
            (m, s) for s in cfg.eval_splits for m in cfg.methods]
        for rep in reports:
            n = cfg.spec.n_train_tasks if rep.rows[0].split == "train" else cfg.spec.n_heldout_tasks
            assert len(rep.rows) == n
            assert all(0.0 <= r.pl_accuracy <= 1.0 for r in rep.rows)
        assert trained.selected == len(trained.run.phis) - 1

    def test_sft_method_is_the_initialisation(self, cfg):
        cfg1 = replace(cfg, methods=("sft",))
        suite = pipeline.gen(cfg1, 0)
        trained = pipeline.train(cfg1, 0, suite)
        assert trained.run is None and trained.phi_mtrm is None
        pols = pipeline.adapt(cfg1, 0, suite, trained)
        from metarm.meta import sft_fit
        td = suite["heldout"][0]
        np.testing.assert_array_equal(pols["heldout"]["sft"][td.task.task_id],
                                      sft_fit(td.task, td.ft, cfg.sft.steps, cfg.sft.lr))

    def test_method_subset_does_not_change_other_methods(self, cfg):
        # streams are keyed per method index, so keep the order of the survivors
        full, _ = pipeline.run_seed(cfg, 1)
        part, _ = pipeline.run_seed(replace(cfg, methods=("sft", "mtrm")), 1)
        by = {(r.method, r.rows[0].split): r.mean_accuracy for r in full}
        for r in part:
            assert by[(r.method, r.rows[0].split)] == r.mean_accuracy

    def test_select_on_train(self, cfg):
        cfg1 = replace(cfg, meta=replace(cfg.meta, select="train"), methods=("ours",))
        trained = pipeline.train(cfg1, 0, pipeline.gen(cfg1, 0))
        assert 0 <= trained.selected < len(trained.run.phis)
        np.testing.assert_array_equal(trained.phi_ours.phi, trained.run.phis[trained.selected])

    def test_workers_give_same_rows(self, cfg):
        a = pipeline.sweep(cfg, cfg.seeds, "beta", ["8"])
        b = pipeline.sweep(replace(cfg, workers=2), cfg.seeds, "beta", ["8"])
        assert a == b


class TestFiles:
    def test_gen_count(self, cfg, staged):
        n_tasks = cfg.spec.n_train_tasks + cfg.spec.n_heldout_tasks
        for s in cfg.seeds:
            assert len(list((staged / "data" / f"seed_{s}").glob("*.tsv"))) == 3 * n_tasks

    def test_files_match_in_memory(self, cfg, staged):
        rows = pipeline.read_results(staged / "eval" / "results.tsv")
        for s in cfg.seeds:
            reports, _ = pipeline.run_seed(cfg, s)
            mem = [r for rep in reports for r in rep.rows]
            assert [r for r in rows if r.seed == s] == mem

    def test_data_round_trip(self, cfg, staged):
        suite = pipeline.gen(cfg, 0)
        back = pipeline.read_data(cfg, 0, staged)
        for split in suite:
            for a, b in zip(suite[split], back[split]):
                np.testing.assert_array_equal(a.task.policy_features, b.task.policy_features)
                np.testing.assert_array_equal(a.task.true_weights, b.task.true_weights)
                np.testing.assert_array_equal(a.ft.y, b.ft.y)
                np.testing.assert_array_equal(a.pref.preferred, b.pref.preferred)

    def test_trajectory_and_reward_files(self, cfg, staged):
        meta, cols, rows = read_table(staged / "train" / "seed_0" / "ours.trajectory.tsv")
        assert cols[0] == "k" and len(cols) == cfg.spec.q + 1
        assert [int(r[0]) for r in rows] == [0, 2, 4, 6]
        assert meta["seed"] == 0 and meta["config"] == cfg.to_dict()
        _, _, run_rows = read_table(staged / "train" / "seed_0" / "ours.run.tsv")
        assert len(run_rows) == cfg.hp.outer_steps

    def test_results_header(self, cfg, staged):
        meta, cols, rows = read_table(staged / "eval" / "results.tsv", "results")
        assert cols == ["method", "task", "split", "seed", "n_pairs", "pl_accuracy",
                        "true_reward"]
        n = len(cfg.seeds) * len(cfg.methods) * (cfg.spec.n_train_tasks + cfg.spec.n_heldout_tasks)
        assert len(rows) == n and meta["seed"] == list(cfg.seeds)

    def test_report(self, cfg, staged):
        _, _, summary = read_table(staged / "report" / "summary.tsv", "summary")
        assert len(summary) == len(cfg.methods) * len(cfg.eval_splits)
        assert all(int(r[2]) == len(cfg.seeds) for r in summary)
        _, _, trace = read_table(staged / "report" / "grad_trace.tsv", "grad_trace")
        assert [int(r[1]) for r in trace if int(r[0]) == 0] == [2, 4, 6]

    def test_missing_upstream_names_the_file(self, cfg, tmp_path):
        with pytest.raises(FileNotFoundError, match="train_00.task.tsv"):
            pipeline.write_train(cfg, 0, tmp_path)


class TestSweep:
    def test_cardinality(self, cfg):
        rows = pipeline.sweep(cfg, cfg.seeds, "K", ["2", "4"])
        per = len(cfg.methods) * len(cfg.eval_splits) * 2 + 1  # two metrics, plus grad trace
        assert len(rows) == 2 * len(cfg.seeds) * per
        assert {r[1] for r in rows} == {2, 4}

    def test_singleton_equals_plain_run(self, cfg):
        rows = pipeline.sweep(cfg, (0,), "beta", [str(cfg.hp.beta)])
        reports, _ = pipeline.run_seed(cfg, 0)
        got = {(r[3], r[4]): r[6] for r in rows if r[5] == "pl_accuracy"}
        assert got == {(r.method, r.rows[0].split): r.mean_accuracy for r in reports}

    def test_bad_values(self, cfg):
        with pytest.raises(UsageError):
            pipeline.sweep(cfg, (0,), "K", ["x"])
        with pytest.raises(UsageError):
            pipeline.sweep(cfg, (0,), "gamma", ["1"])
        with pytest.raises(UsageError):
            pipeline.sweep(cfg, (0,), "beta", ["-1"])

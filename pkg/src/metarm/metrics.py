"""Evaluation of fitted policies against preference data and true rewards."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PreferencePairs, UsageError
from .models import TaskInstance, policy_logprobs

RESULT_COLUMNS = ("method", "task", "split", "seed", "n_pairs", "pl_accuracy", "true_reward")


def pl_accuracy(theta, prefs: PreferencePairs, task: TaskInstance) -> float:
    """Share of pairs whose preferred response has the strictly larger
    length-normalized log-probability. Ties count as wrong."""
    if len(prefs) == 0:
        raise UsageError("PL accuracy of an empty preference set")
    return pl_accuracy_from_logprobs(policy_logprobs(theta, task), prefs, task)


def pl_accuracy_from_logprobs(logprobs, prefs: PreferencePairs, task: TaskInstance) -> float:
    normalized = logprobs / task.lengths
    win = normalized[prefs.x, prefs.preferred]
    lose = normalized[prefs.x, prefs.dispreferred]
    return float(np.mean(win > lose))


def true_reward_eval(theta, task: TaskInstance) -> float:
    """E_{x ~ D_x} E_{y ~ pi_theta(.|x)} r*(x, y), by enumeration."""
    return expected_true_reward(np.exp(policy_logprobs(theta, task)), task)


def expected_true_reward(policy, task: TaskInstance) -> float:
    reward = task.true_reward()
    policy = np.where(task.mask, policy, 0.0)
    return float(task.prompt_probs @ np.sum(policy * reward, axis=1))


def grad_norm_trace(grad_norms, stride: int = 1, at=None):
    """Running mean of squared hypergradient norms over prefixes.

    Returns ``(ks, values)`` where ``values[i]`` is the mean of the first
    ``ks[i]`` squared norms. ``ks`` is every ``stride``-th prefix length, or
    the explicit lengths given in ``at``.
    """
    sq = np.asarray(getattr(grad_norms, "grad_norms", grad_norms), dtype=np.float64) ** 2
    if sq.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    running = np.cumsum(sq) / np.arange(1, sq.size + 1)
    if at is None:
        ks = np.arange(stride, sq.size + 1, stride)
    else:
        ks = np.asarray(at, dtype=np.int64)
        if np.any(ks < 1) or np.any(ks > sq.size):
            raise UsageError(f"prefix lengths must lie in [1, {sq.size}]")
    return ks, running[ks - 1]


@dataclass(frozen=True)
class EvalRow:
    method: str
    task: str
    split: str
    seed: int
    n_pairs: int
    pl_accuracy: float
    true_reward: float

    def as_tuple(self):
        return tuple(getattr(self, c) for c in RESULT_COLUMNS)


@dataclass(frozen=True)
class EvalReport:
    method: str
    seed: int
    rows: tuple

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.pl_accuracy for r in self.rows]))

    @property
    def mean_true_reward(self) -> float:
        return float(np.mean([r.true_reward for r in self.rows]))


def evaluate(method: str, seed: int, policies, task_data) -> EvalReport:
    """One row per task; ``policies`` maps task id to theta."""
    rows = []
    for td in task_data:
        theta = policies[td.task.task_id]
        reward = true_reward_eval(theta, td.task) if td.task.has_ground_truth else float("nan")
        rows.append(EvalRow(method, td.task.task_id, td.task.split, seed, len(td.pref),
                            pl_accuracy(theta, td.pref, td.task), reward))
    return EvalReport(method, seed, tuple(rows))

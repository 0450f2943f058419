"""Exact solutions of the KL-regularized fine-tuning problem on finite tasks.

The optimal policy reweights the reference distribution D_{y|x} by
exp(r / beta) and renormalizes per prompt. These routines never sample; they
exist to validate the stochastic training path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import UsageError, log_sum_exp
from .models import RewardParams, TaskInstance, reward_values, tabular_theta
from .objectives import expected_loss_ft


def _log_tilted(task: TaskInstance, phi: RewardParams, beta: float) -> np.ndarray:
    if not beta > 0:
        raise UsageError("beta must be positive")
    with np.errstate(divide="ignore"):
        log_ref = np.log(task.response_probs)
    return np.where(task.mask, log_ref + reward_values(phi, task) / beta, -np.inf)


def partition(task: TaskInstance, phi: RewardParams, beta: float, x: int) -> float:
    """Z(x) = sum_y D_{y|x}(y) exp(r_phi(x, y) / beta)."""
    task.check_response(x, 0)
    return float(np.exp(log_sum_exp(_log_tilted(task, phi, beta)[x])))


def optimal_policy(task: TaskInstance, phi: RewardParams, beta: float) -> np.ndarray:
    """(n_x, n_y) table of D_{y|x}(y) exp(r/beta) / Z(x); exact zeros are kept."""
    logits = _log_tilted(task, phi, beta)
    out = np.exp(logits - log_sum_exp(logits, axis=1)[:, None])
    return np.where(task.mask, out, 0.0)


def tabular_inner_minimizer(task: TaskInstance, phi: RewardParams, beta: float) -> np.ndarray:
    """theta whose one-hot logits are log D_{y|x}(y) + r_phi(x, y) / beta."""
    if not task.tabular:
        raise UsageError("tabular_inner_minimizer needs a task with one-hot features")
    if np.any(task.response_probs[task.mask] <= 0):
        raise UsageError("a log-linear policy cannot express zero-probability reference cells")
    return tabular_theta(task, _log_tilted(task, phi, beta))


@dataclass(frozen=True)
class InnerMinResult:
    theta: np.ndarray
    loss: float
    grad_norm: float
    steps: int
    converged: bool


def brute_force_inner_min(task: TaskInstance, phi: RewardParams, beta: float,
                          budget: int = 50_000, ridge: float = 0.0, theta0=None,
                          tol: float = 1e-8) -> InnerMinResult:
    """Full-batch gradient descent with Armijo backtracking on the exact expected loss.

    ``converged`` is False when the budget runs out before the gradient norm
    reaches ``tol``.
    """
    theta = np.zeros(task.p) if theta0 is None else np.array(theta0, dtype=np.float64)
    value, grad = expected_loss_ft(phi, theta, task, beta, ridge)
    step = 1.0
    steps = 0
    while steps < budget:
        gnorm2 = float(grad @ grad)
        if np.sqrt(gnorm2) <= tol:
            break
        while True:
            candidate = theta - step * grad
            cand_value, cand_grad = expected_loss_ft(phi, candidate, task, beta, ridge)
            if cand_value <= value - 0.5 * step * gnorm2 or step < 1e-12:
                break
            step *= 0.5
        # stagnated in floating point: keep the best point we have
        if cand_value > value or step < 1e-12:
            break
        theta, value, grad = candidate, cand_value, cand_grad
        step = min(step * 2.0, 1e4)
        steps += 1
    gnorm = float(np.linalg.norm(grad))
    return InnerMinResult(theta, float(value), gnorm, steps, gnorm <= tol)

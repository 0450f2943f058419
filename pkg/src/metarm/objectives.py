"""Scalar losses: fine-tuning, preference, Bradley-Terry, RM likelihood, SFT
and the exact KL-regularized RL objective.

Each loss returns a :class:`LossValue` whose gradient is taken with respect to
the parameter block named in the function docstring.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import (
    DomainError,
    Example,
    Examples,
    PreferencePair,
    PreferencePairs,
    UsageError,
    kl_divergence,
    log_logistic,
    logistic,
)
from .models import (
    RewardParams,
    TaskInstance,
    policy_grad,
    policy_logprob,
    policy_logprobs,
    reward_value,
    reward_values,
)


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray | None = None


def loss_ft(phi: RewardParams, theta, z: Example, beta: float, task: TaskInstance,
            ridge: float = 0.0) -> LossValue:
    """-log pi_theta(y|x) * exp(r_phi(x, y) / beta) + ridge/2 |theta|^2, grad in theta."""
    x, y = z
    weight = np.exp(reward_value(phi, x, y, task) / beta)
    value = -policy_logprob(theta, x, y, task) * weight + 0.5 * ridge * float(theta @ theta)
    grad = -policy_grad(theta, x, y, task) * weight + ridge * theta
    return LossValue(value, grad)


def loss_pl(theta, nu: PreferencePair, task: TaskInstance) -> LossValue:
    """-log sigma(log pi(y|x) - log pi(y'|x)), grad in theta.

    The reward parameters influence this loss only through theta.
    """
    x, y, y_prime = nu
    margin = policy_logprob(theta, x, y, task) - policy_logprob(theta, x, y_prime, task)
    grad_margin = policy_grad(theta, x, y, task) - policy_grad(theta, x, y_prime, task)
    return LossValue(float(-log_logistic(margin)), -(1.0 - logistic(margin)) * grad_margin)


def bt_prob(theta, x: int, y: int, y_prime: int, task: TaskInstance) -> float:
    """p(y > y' | x) = pi(y|x) / (pi(y|x) + pi(y'|x))."""
    if y == y_prime:
        raise DomainError("Bradley-Terry probability needs two distinct responses")
    margin = policy_logprob(theta, x, y, task) - policy_logprob(theta, x, y_prime, task)
    return float(logistic(margin))


def rm_mle_loss(phi: RewardParams, batch: PreferencePairs, task: TaskInstance) -> LossValue:
    """Mean of -log sigma(r(x, y) - r(x, y')), grad in phi."""
    if len(batch) == 0:
        raise UsageError("reward-model loss on an empty preference batch")
    feats = task.reward_features
    f_win = feats[batch.x, batch.preferred]
    f_lose = feats[batch.x, batch.dispreferred]
    t_win = np.tanh(f_win @ phi.phi)
    t_lose = np.tanh(f_lose @ phi.phi)
    margin = phi.r_max * (t_win - t_lose)
    d_margin = phi.r_max * (((1 - t_win ** 2)[:, None] * f_win) - ((1 - t_lose ** 2)[:, None] * f_lose))
    coef = -(1.0 - logistic(margin))
    return LossValue(float(np.mean(-log_logistic(margin))), (coef @ d_margin) / len(batch))


def sft_loss(theta, batch: Examples, task: TaskInstance) -> LossValue:
    """Mean negative log-likelihood of the batch, grad in theta."""
    if len(batch) == 0:
        raise UsageError("SFT loss on an empty batch")
    feats = task.policy_features[batch.x]  # (n, n_y, p)
    scores = np.where(task.mask[batch.x], feats @ theta, -np.inf)
    m = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    rows = np.arange(len(batch))
    logp = scores[rows, batch.y] - (m[:, 0] + np.log(z[:, 0]))
    expected = np.einsum("ny,nyp->np", probs, feats)
    grad = -(feats[rows, batch.y] - expected).mean(axis=0)
    return LossValue(float(-logp.mean()), grad)


def expected_loss_ft(phi: RewardParams, theta, task: TaskInstance, beta: float,
                     ridge: float = 0.0) -> LossValue:
    """Exact E_{x ~ D_x, y ~ D_{y|x}} of :func:`loss_ft`, grad in theta."""
    weights = task.prompt_probs[:, None] * task.response_probs * np.exp(reward_values(phi, task) / beta)
    logp = policy_logprobs(theta, task)
    probs = np.exp(logp)
    safe_logp = np.where(weights > 0, logp, 0.0)
    value = -float(np.sum(weights * safe_logp)) + 0.5 * ridge * float(theta @ theta)
    feats = task.policy_features
    mean_feat = np.einsum("xy,xyp->xp", probs, feats)
    centered = feats - mean_feat[:, None, :]
    grad = -np.einsum("xy,xyp->p", weights, centered) + ridge * theta
    return LossValue(value, grad)


def rlhf_objective_table(policy, phi: RewardParams, task: TaskInstance, beta: float) -> float:
    """E_x[ E_{y ~ policy}[r_phi] - beta * KL(policy(.|x) || D_{y|x}) ] by enumeration.

    ``policy`` is an (n_x, n_y) table. A policy putting mass where the
    reference has none has infinite KL, so the value is -inf.
    """
    policy = np.where(task.mask, np.asarray(policy, dtype=np.float64), 0.0)
    rewards = reward_values(phi, task)
    kl = kl_divergence(policy, task.response_probs, axis=1)
    per_prompt = np.sum(policy * rewards, axis=1) - beta * kl
    return float(task.prompt_probs @ per_prompt)


def rlhf_objective_value(theta, phi: RewardParams, task: TaskInstance, beta: float) -> float:
    return rlhf_objective_table(np.exp(policy_logprobs(theta, task)), phi, task, beta)

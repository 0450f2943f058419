"""Unrolled inner SGD and the exact gradient of the outer preference loss
with respect to the reward parameters through that unrolled path.

Shape contract for one inner step t:

    grad_reward[t]  (q,)    gradient of r_phi(x_t, y_t) in phi
    grad_logp[t]    (p,)    gradient of log pi(y_t | x_t) at theta_t
    hess_logp[t]    (p, p)  Hessian of log pi(. | x_t) at theta_t
    weight[t]       ()      exp(r_phi(x_t, y_t) / beta)

The Jacobian d theta_D / d phi is never formed. A p-vector is carried from
the end of the trajectory back to the start and each step adds a rank-one
contribution in phi-space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Examples,
    PreferencePair,
    UsageError,
    log_logistic,
    logistic,
    make_rng,
    softmax,
)
from .models import RewardParams, TaskInstance


@dataclass(frozen=True, eq=False)
class InnerTrace:
    theta0: np.ndarray
    samples: Examples
    thetas: np.ndarray  # (D, p), theta_t before step t
    grad_logp: np.ndarray  # (D, p)
    hess_logp: np.ndarray  # (D, p, p)
    rewards: np.ndarray  # (D,)
    weights: np.ndarray  # (D,)
    grad_reward: np.ndarray  # (D, q)
    theta_final: np.ndarray
    alpha: float
    beta: float
    ridge: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.samples)

    def replay(self) -> np.ndarray:
        """Recompute theta_D from theta0 and the cached per-step pieces."""
        theta = self.theta0.copy()
        for t in range(self.n_steps):
            theta = _sgd_step(theta, self.grad_logp[t], self.weights[t], self.alpha, self.ridge)
        return theta


@dataclass(frozen=True)
class Hypergradient:
    vector: np.ndarray
    contribution_norms: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _sgd_step(theta, grad_logp, weight, alpha, ridge):
    return theta - alpha * (-grad_logp * weight + ridge * theta)


def _grad_hess(theta, feats, y):
    probs = softmax(feats @ theta)
    centered = feats - probs @ feats
    return centered[y], -(centered.T * probs) @ centered


def run_inner_sgd(phi: RewardParams, theta0, sample_stream: Examples, alpha: float,
                  beta: float, task: TaskInstance, ridge: float = 0.0) -> InnerTrace:
    """D steps of theta <- theta - alpha * grad_theta loss_ft, one sample per step."""
    if not alpha > 0 or not beta > 0:
        raise UsageError("alpha and beta must be positive")
    theta = np.array(theta0, dtype=np.float64)
    theta0 = theta.copy()
    n = len(sample_stream)
    p, q = task.p, task.q
    thetas = np.empty((n, p))
    grad_logp = np.empty((n, p))
    hess_logp = np.empty((n, p, p))
    rewards = np.empty(n)
    weights = np.empty(n)
    grad_reward = np.empty((n, q))
    pf, rf, nc = task.policy_features, task.reward_features, task.n_candidates
    for t in range(n):
        x, y = int(sample_stream.x[t]), int(sample_stream.y[t])
        thetas[t] = theta
        g, h = _grad_hess(theta, pf[x, : nc[x]], y)
        grad_logp[t] = g
        hess_logp[t] = h
        tanh = np.tanh(rf[x, y] @ phi.phi)
        rewards[t] = phi.r_max * tanh
        grad_reward[t] = phi.r_max * (1.0 - tanh * tanh) * rf[x, y]
        weights[t] = np.exp(rewards[t] / beta)
        theta = _sgd_step(theta, g, weights[t], alpha, ridge)
    return InnerTrace(theta0, sample_stream, thetas, grad_logp, hess_logp, rewards,
                      weights, grad_reward, theta, float(alpha), float(beta), float(ridge))


def inner_sgd_final(phi: RewardParams, theta0, sample_stream: Examples, alpha: float,
                    beta: float, task: TaskInstance, ridge: float = 0.0) -> np.ndarray:
    """theta_D only; the same arithmetic as :func:`run_inner_sgd` without caching."""
    theta = np.array(theta0, dtype=np.float64)
    pf, rf, nc = task.policy_features, task.reward_features, task.n_candidates
    for t in range(len(sample_stream)):
        x, y = int(sample_stream.x[t]), int(sample_stream.y[t])
        feats = pf[x, : nc[x]]
        probs = softmax(feats @ theta)
        g = (feats - probs @ feats)[y]
        weight = np.exp(phi.r_max * np.tanh(rf[x, y] @ phi.phi) / beta)
        theta = _sgd_step(theta, g, weight, alpha, ridge)
    return theta


def _margin_and_grad(theta, nu: PreferencePair, task: TaskInstance):
    x, y, y_prime = nu
    task.check_response(x, y)
    task.check_response(x, y_prime)
    feats = task.policy_features[x, : task.n_candidates[x]]
    scores = feats @ theta
    return scores[y] - scores[y_prime], feats[y] - feats[y_prime]


def outer_loss(theta, nu: PreferencePair, task: TaskInstance) -> float:
    margin, _ = _margin_and_grad(theta, nu, task)
    return float(-log_logistic(margin))


def prop1_hypergrad(trace: InnerTrace, nu: PreferencePair, task: TaskInstance) -> Hypergradient:
    """d loss_pl(theta_D) / d phi through the recorded inner trajectory."""
    if trace.grad_reward.shape[1:] != (task.q,) or trace.theta_final.shape != (task.p,):
        raise UsageError("trace dimensions do not match the task")
    margin, grad_margin = _margin_and_grad(trace.theta_final, nu, task)
    return backprop_through_trace(trace, grad_margin * (1.0 - logistic(margin)))


def backprop_through_trace(trace: InnerTrace, seed) -> Hypergradient:
    """Contract ``seed`` (p,) with -d theta_D / d phi.

    The map is linear in ``seed``, so summing the seeds of several outer
    losses that share one trace gives the summed hypergradient in one pass.
    """
    alpha, beta, ridge = trace.alpha, trace.beta, trace.ridge
    v = np.array(seed, dtype=np.float64)
    out = np.zeros(trace.grad_reward.shape[1])
    norms = np.zeros(trace.n_steps)
    for t in range(trace.n_steps - 1, -1, -1):
        term = (-alpha / beta) * trace.weights[t] * float(trace.grad_logp[t] @ v) * trace.grad_reward[t]
        norms[t] = np.linalg.norm(term)
        out += term
        v = v + alpha * trace.weights[t] * (trace.hess_logp[t] @ v) - alpha * ridge * v
    return Hypergradient(out, norms)


def batch_hypergrad(trace: InnerTrace, nus, task: TaskInstance):
    """Mean outer loss and mean hypergradient over several comparisons."""
    seed = np.zeros(task.p)
    loss = 0.0
    for nu in nus:
        margin, grad_margin = _margin_and_grad(trace.theta_final, nu, task)
        seed += grad_margin * (1.0 - logistic(margin))
        loss += float(-log_logistic(margin))
    n = len(nus)
    return loss / n, backprop_through_trace(trace, seed / n).vector


def fd_hypergrad(phi: RewardParams, theta0, sample_stream: Examples, nu: PreferencePair,
                 alpha: float, beta: float, task: TaskInstance, ridge: float = 0.0,
                 epsilon: float = 1e-4) -> np.ndarray:
    """Central differences of phi -> loss_pl(theta_D(phi)) with the stream held fixed."""
    base = phi.phi
    out = np.zeros_like(base)
    for i in range(base.size):
        shifted = base.copy()
        shifted[i] = base[i] + epsilon
        plus = outer_loss(inner_sgd_final(phi.with_phi(shifted), theta0, sample_stream,
                                          alpha, beta, task, ridge), nu, task)
        shifted[i] = base[i] - epsilon
        minus = outer_loss(inner_sgd_final(phi.with_phi(shifted), theta0, sample_stream,
                                           alpha, beta, task, ridge), nu, task)
        out[i] = (plus - minus) / (2.0 * epsilon)
    return out


# -- verification harness ------------------------------------------------------

@dataclass(frozen=True)
class CheckConfig:
    max_p: int = 20
    max_q: int = 20
    max_steps: int = 10
    epsilon: float = 1e-4
    rel_tol: float = 1e-5
    cos_tol: float = 1e-8
    min_steps: int = 1


@dataclass(frozen=True)
class CheckRow:
    instance: int
    p: int
    q: int
    steps: int
    alpha: float
    beta: float
    ridge: float
    analytic_norm: float
    rel_error: float
    cosine: float
    passed: bool


@dataclass(frozen=True)
class CheckReport:
    rows: list
    max_rel_error: float
    min_cosine: float
    passed: bool


def random_instance(rng: np.random.Generator, cfg: CheckConfig = CheckConfig()):
    """A small random task with parameters, a sample stream and one preference pair."""
    p = int(rng.integers(1, cfg.max_p + 1))
    q = int(rng.integers(1, cfg.max_q + 1))
    n_x = int(rng.integers(1, 5))
    n_y = int(rng.integers(2, 6))
    pf = rng.normal(size=(n_x, n_y, p))
    rf = rng.normal(size=(n_x, n_y, q)) / np.sqrt(q)
    probs = rng.dirichlet(np.ones(n_y), size=n_x)
    task = TaskInstance(pf, rf, rng.integers(1, 9, size=(n_x, n_y)),
                        np.full(n_x, 1.0 / n_x), probs, task_id="check")
    steps = int(rng.integers(cfg.min_steps, cfg.max_steps + 1))
    stream = Examples(rng.integers(0, n_x, size=steps), rng.integers(0, n_y, size=steps))
    x = int(rng.integers(0, n_x))
    y, y_prime = (int(v) for v in rng.choice(n_y, size=2, replace=False))
    phi = RewardParams(rng.normal(size=q), r_max=float(rng.uniform(0.5, 2.0)))
    theta0 = rng.normal(scale=0.5, size=p)
    alpha = float(rng.uniform(0.05, 0.3)) / np.sqrt(p)
    beta = float(rng.uniform(0.5, 4.0))
    ridge = float(rng.choice([0.0, 1e-3, 0.1]))
    return task, phi, theta0, stream, PreferencePair(x, y, y_prime), alpha, beta, ridge


def compare(analytic, numeric):
    """(relative l2 error, cosine similarity) of analytic against numeric."""
    na, nn = np.linalg.norm(analytic), np.linalg.norm(numeric)
    if nn == 0.0:
        return (0.0, 1.0) if na == 0.0 else (np.inf, 0.0)
    rel = float(np.linalg.norm(analytic - numeric) / nn)
    cos = float(analytic @ numeric / (na * nn)) if na > 0 else 0.0
    return rel, cos


def check_hypergrad(cfg: CheckConfig = CheckConfig(), n_instances: int = 100, rng=None,
                    hypergrad_fn=None) -> CheckReport:
    """Compare the analytic hypergradient with finite differences on random instances."""
    if n_instances < 1:
        raise UsageError("n_instances must be >= 1")
    rng = make_rng(0) if rng is None else rng
    hypergrad_fn = prop1_hypergrad if hypergrad_fn is None else hypergrad_fn
    rows = []
    for i in range(n_instances):
        task, phi, theta0, stream, nu, alpha, beta, ridge = random_instance(rng, cfg)
        trace = run_inner_sgd(phi, theta0, stream, alpha, beta, task, ridge)
        analytic = hypergrad_fn(trace, nu, task).vector
        numeric = fd_hypergrad(phi, theta0, stream, nu, alpha, beta, task, ridge, cfg.epsilon)
        rel, cos = compare(analytic, numeric)
        ok = rel <= cfg.rel_tol and cos >= 1.0 - cfg.cos_tol
        rows.append(CheckRow(i, task.p, task.q, len(stream), alpha, beta, ridge,
                             float(np.linalg.norm(analytic)), rel, cos, ok))
    max_rel = max(r.rel_error for r in rows)
    min_cos = min(r.cosine for r in rows)
    return CheckReport(rows, max_rel, min_cos, all(r.passed for r in rows))

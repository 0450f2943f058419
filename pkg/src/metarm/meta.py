"""Meta-training of a shared reward model, test-time adaptation and baselines.

Meta-training repeats: pick a training task, start the policy from that
task's SFT solution, run a short inner SGD on the reward-weighted likelihood,
then move the reward parameters along the exact hypergradient of the
preference loss of one sampled comparison.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Examples, HyperParams, UsageError, logistic, make_rng, softmax
from .hypergrad import batch_hypergrad, run_inner_sgd
from .metrics import pl_accuracy
from .models import RewardParams, TaskInstance
from .objectives import expected_loss_ft, loss_pl, rm_mle_loss, sft_loss
from .synth import TaskData

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StoppingRule:
    max_steps: int = 5000
    grad_norm_tol: float = 1e-6
    patience: int = 250

    def __post_init__(self):
        if self.max_steps < 0 or self.patience < 1:
            raise UsageError("max_steps must be >= 0 and patience >= 1")


@dataclass(frozen=True)
class MetaTrainRun:
    phi_steps: np.ndarray  # outer iteration index of each stored phi
    phis: np.ndarray  # (n_stored, q)
    task_ids: list
    outer_losses: np.ndarray
    grad_norms: np.ndarray
    r_max: float
    config: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def final(self) -> RewardParams:
        return RewardParams(self.phis[-1], self.r_max)

    def reward(self, i: int) -> RewardParams:
        return RewardParams(self.phis[i], self.r_max)


# -- SFT ---------------------------------------------------------------------

def sft_fit(task: TaskInstance, data: Examples, steps: int, lr: float, rng=None,
            batch_size: int | None = None, theta0=None) -> np.ndarray:
    """SGD on the mean negative log-likelihood of ``data``.

    ``batch_size=None`` uses the whole dataset every step (plain gradient
    descent, no randomness consumed).
    """
    if steps < 0:
        raise UsageError("steps must be >= 0")
    theta = np.zeros(task.p) if theta0 is None else np.array(theta0, dtype=np.float64)
    for _ in range(steps):
        if batch_size is None:
            batch = data
        else:
            batch = data.take(rng.integers(0, len(data), size=batch_size))
        theta = theta - lr * sft_loss(theta, batch, task).grad
    return theta


class SFTCache:
    """SFT parameters per task, fitted once and reused."""

    def __init__(self, steps: int, lr: float):
        self.steps = steps
        self.lr = lr
        self._cache = {}

    def __call__(self, td: TaskData) -> np.ndarray:
        key = td.task.task_id
        if key not in self._cache:
            self._cache[key] = sft_fit(td.task, td.ft, self.steps, self.lr)
        return self._cache[key].copy()


# -- meta-training -----------------------------------------------------------

def meta_outer_step(phi: RewardParams, theta0, stream: Examples, nus, task: TaskInstance,
                    hp: HyperParams):
    """One outer iteration on a fixed inner stream and comparison(s).

    Returns the updated reward, the mean outer loss and the hypergradient.
    """
    trace = run_inner_sgd(phi, theta0, stream, hp.alpha, hp.beta, task, hp.ridge)
    loss, grad = batch_hypergrad(trace, nus, task)
    return phi.with_phi(phi.phi - hp.eta * grad), loss, grad


def meta_train(tasks: list[TaskData], hp: HyperParams, sft_steps: int, rng: np.random.Generator,
               r_max: float = 1.0, phi0=None, stride: int | None = None, sft_lr: float = 0.5,
               outer_batch: int = 1, sft: SFTCache | None = None) -> MetaTrainRun:
    """K outer iterations of the bilevel loop; every ``stride``-th phi is stored."""
    if not tasks:
        raise UsageError("meta_train needs at least one task")
    for td in tasks:
        if len(td.pref) == 0 or len(td.ft) == 0:
            raise UsageError(f"task {td.task.task_id!r} has an empty dataset")
    q = tasks[0].task.q
    phi = RewardParams(np.zeros(q) if phi0 is None else phi0, r_max)
    sft = SFTCache(sft_steps, sft_lr) if sft is None else sft
    K = hp.outer_steps
    stride = max(1, K // 20) if stride is None else stride
    phi_steps, phis = [0], [phi.phi.copy()]
    task_ids, losses, norms = [], np.zeros(K), np.zeros(K)
    for k in range(K):
        td = tasks[int(rng.integers(len(tasks)))]
        theta0 = sft(td)
        stream = td.ft.take(rng.integers(0, len(td.ft), size=hp.inner_steps))
        picks = rng.integers(0, len(td.pref), size=outer_batch)
        nus = [td.pref[int(i)] for i in picks]
        phi, losses[k], grad = meta_outer_step(phi, theta0, stream, nus, td.task, hp)
        norms[k] = np.linalg.norm(grad)
        task_ids.append(td.task.task_id)
        if (k + 1) % stride == 0 or k + 1 == K:
            phi_steps.append(k + 1)
            phis.append(phi.phi.copy())
    config = {"hp": hp.__dict__.copy(), "sft_steps": sft_steps, "r_max": r_max,
              "outer_batch": outer_batch, "stride": stride}
    return MetaTrainRun(np.array(phi_steps), np.array(phis), task_ids, losses, norms,
                        r_max, config, hp.seed)


# -- meta-test ---------------------------------------------------------------

def _full_batch(phi: RewardParams, theta, task: TaskInstance, beta: float, ridge: float,
                data: Examples | None):
    """Value and gradient of the fine-tuning loss averaged over ``data``
    (or the exact task distribution when ``data`` is None)."""
    if data is None:
        return expected_loss_ft(phi, theta, task, beta, ridge)
    weights = np.exp(phi.r_max * np.tanh(task.reward_features[data.x, data.y] @ phi.phi) / beta)
    feats = task.policy_features[data.x]
    scores = np.where(task.mask[data.x], feats @ theta, -np.inf)
    probs = softmax(scores, axis=1)
    rows = np.arange(len(data))
    with np.errstate(divide="ignore"):
        logp = np.log(probs[rows, data.y])
    centered = feats[rows, data.y] - np.einsum("ny,nyp->np", probs, feats)
    value = -float(np.mean(weights * logp)) + 0.5 * ridge * float(theta @ theta)
    grad = -(weights @ centered) / len(data) + ridge * theta
    return value, grad


def _sample_examples(task: TaskInstance, data: Examples | None, n: int, rng) -> Examples:
    if data is not None:
        return data.take(rng.integers(0, len(data), size=n))
    x = rng.choice(task.n_prompts, size=n, p=task.prompt_probs)
    cdf = np.cumsum(task.response_probs[x], axis=1)
    y = np.sum(cdf < (rng.random(n) * cdf[:, -1])[:, None], axis=1)
    return Examples(x, np.minimum(y, task.n_candidates[x] - 1))


def meta_test(phi_star: RewardParams, task: TaskInstance, hp: HyperParams,
              stopping: StoppingRule, rng: np.random.Generator, data: Examples | None = None,
              theta0=None, batch_size: int = 1, keep_best: bool = True) -> np.ndarray:
    """SGD on the reward-weighted likelihood with the reward held fixed.

    Every ``stopping.patience`` steps the full-batch loss and gradient are
    measured; the run stops once the gradient norm is at most
    ``stopping.grad_norm_tol``. With ``keep_best`` the checkpoint of minimum
    full-batch loss is returned, otherwise the last iterate.
    """
    theta = np.zeros(task.p) if theta0 is None else np.array(theta0, dtype=np.float64)
    best_value, _ = _full_batch(phi_star, theta, task, hp.beta, hp.ridge, data)
    best = theta.copy()
    pf, nc = task.policy_features, task.n_candidates
    for start in range(0, stopping.max_steps, stopping.patience):
        n = min(stopping.patience, stopping.max_steps - start)
        chunk = _sample_examples(task, data, n * batch_size, rng)
        weights = np.exp(phi_star.r_max * np.tanh(
            task.reward_features[chunk.x, chunk.y] @ phi_star.phi) / hp.beta)
        if batch_size == 1:
            for t in range(n):
                x, y = int(chunk.x[t]), int(chunk.y[t])
                feats = pf[x, : nc[x]]
                probs = softmax(feats @ theta)
                g = (feats - probs @ feats)[y]
                theta = theta - hp.alpha * (-g * weights[t] + hp.ridge * theta)
        else:
            for t in range(n):
                sl = slice(t * batch_size, (t + 1) * batch_size)
                sub = Examples(chunk.x[sl], chunk.y[sl])
                feats = pf[sub.x]
                probs = softmax(np.where(task.mask[sub.x], feats @ theta, -np.inf), axis=1)
                rows = np.arange(batch_size)
                centered = feats[rows, sub.y] - np.einsum("ny,nyp->np", probs, feats)
                g = (weights[sl] @ centered) / batch_size
                theta = theta - hp.alpha * (-g + hp.ridge * theta)
        if not np.all(np.isfinite(theta)):
            log.warning("meta-test diverged on task %s; alpha * exp(r_max / beta) is too large",
                        task.task_id)
            break
        value, grad = _full_batch(phi_star, theta, task, hp.beta, hp.ridge, data)
        if value < best_value:
            best_value, best = value, theta.copy()
        if np.linalg.norm(grad) <= stopping.grad_norm_tol:
            break
    return best if keep_best else theta


def select_rm(run: MetaTrainRun, eval_tasks: list[TaskData], hp: HyperParams,
              stopping: StoppingRule, sft: SFTCache, seed: int = 0,
              indices=None, batch_size: int = 1) -> tuple[RewardParams, int, np.ndarray]:
    """The stored phi with maximum mean PL accuracy after adaptation; ties go to
    the earliest. Returns (reward, index into run.phis, mean accuracies)."""
    if not eval_tasks:
        raise UsageError("select_rm needs at least one evaluation task")
    indices = range(len(run.phis)) if indices is None else indices
    indices = list(indices)
    if len(indices) == 1:
        return run.reward(indices[0]), indices[0], np.array([np.nan])
    scores = []
    for i in indices:
        accs = []
        for j, td in enumerate(eval_tasks):
            theta = meta_test(run.reward(i), td.task, hp, stopping, make_rng(seed, 7, j),
                              data=td.ft, theta0=sft(td), batch_size=batch_size)
            accs.append(pl_accuracy(theta, td.pref, td.task))
        scores.append(float(np.mean(accs)))
    scores = np.array(scores)
    best = indices[int(np.argmax(scores))]
    return run.reward(best), best, scores


# -- baselines ---------------------------------------------------------------

def baseline_hpl(tasks: list[TaskData], hp: HyperParams, rng: np.random.Generator,
                 steps: int, theta0=None, full_batch: bool = False) -> np.ndarray:
    """SGD on the preference loss itself over pooled training comparisons.

    The step size is ``hp.eta``, the one used on the preference objective
    everywhere else. With ``full_batch`` every step uses the exact gradient of the pooled mean
    loss and no randomness is consumed.
    """
    pooled = [(td.task, td.pref) for td in tasks]
    sizes = np.array([len(p) for _, p in pooled])
    if sizes.sum() == 0:
        raise UsageError("HPL needs preference data")
    theta = np.zeros(tasks[0].task.p) if theta0 is None else np.array(theta0, dtype=np.float64)
    if full_batch:
        for _ in range(steps):
            theta = theta - hp.eta * pooled_pl_grad(theta, tasks)
        return theta
    owner = rng.choice(len(pooled), size=steps, p=sizes / sizes.sum())
    for t in range(steps):
        task, pref = pooled[owner[t]]
        nu = pref[int(rng.integers(len(pref)))]
        theta = theta - hp.eta * loss_pl(theta, nu, task).grad
    return theta


def pooled_pl_loss(theta, tasks: list[TaskData]) -> float:
    total = sum(sum(loss_pl(theta, nu, td.task).value for nu in td.pref) for td in tasks)
    return total / sum(len(td.pref) for td in tasks)


def pooled_pl_grad(theta, tasks: list[TaskData]) -> np.ndarray:
    """Gradient of :func:`pooled_pl_loss`; the log-normalizer cancels in each margin."""
    grad = np.zeros_like(theta)
    for td in tasks:
        pf, pref = td.task.policy_features, td.pref
        diff = pf[pref.x, pref.preferred] - pf[pref.x, pref.dispreferred]
        grad -= (1.0 - logistic(diff @ theta)) @ diff
    return grad / sum(len(td.pref) for td in tasks)


def fit_mtrm_reward(tasks: list[TaskData], steps: int, lr: float, r_max: float = 1.0,
                    rng=None, batch_size: int | None = None) -> RewardParams:
    """Bradley-Terry maximum likelihood for one reward shared by all training tasks.

    Full-batch gradient descent by default; the pooled loss weights tasks by
    their number of comparisons.
    """
    if not tasks or sum(len(td.pref) for td in tasks) == 0:
        raise UsageError("multi-task RM needs preference data")
    phi = RewardParams(np.zeros(tasks[0].task.q), r_max)
    total = sum(len(td.pref) for td in tasks)
    for _ in range(steps):
        grad = np.zeros_like(phi.phi)
        for td in tasks:
            batch = td.pref
            if batch_size is not None:
                batch = batch.take(rng.integers(0, len(batch), size=batch_size))
            grad += rm_mle_loss(phi, batch, td.task).grad * (len(td.pref) / total)
        phi = phi.with_phi(phi.phi - lr * grad)
    return phi


def pooled_rm_loss(phi: RewardParams, tasks: list[TaskData]) -> float:
    total = sum(len(td.pref) for td in tasks)
    return sum(rm_mle_loss(phi, td.pref, td.task).value * len(td.pref) for td in tasks) / total


def baseline_mtrm(tasks: list[TaskData], test: TaskData, hp: HyperParams, rng, stopping,
                  rm_steps: int, rm_lr: float, r_max: float = 1.0, theta0=None,
                  batch_size: int = 1):
    """Pooled reward model, then the same adaptation as meta-test. Returns (theta, reward)."""
    phi = fit_mtrm_reward(tasks, rm_steps, rm_lr, r_max)
    theta = meta_test(phi, test.task, hp, stopping, rng, data=test.ft, theta0=theta0,
                      batch_size=batch_size)
    return theta, phi

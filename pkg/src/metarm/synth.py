"""Synthetic meta-distributions of tasks with known linear rewards.

All tasks share one feature map (drawn from the spec seed) so that a single
reward model can transfer across them. Tasks differ in their prompts, their
candidate responses and their true reward weights. Heldout tasks draw their
weights around a prior mean that is shifted by ``shift`` along a fixed unit
direction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .core import Examples, PreferencePairs, UsageError, logistic, make_rng, softmax
from .models import TaskInstance

SPLITS = ("train", "heldout")


@dataclass(frozen=True)
class MetaDistributionSpec:
    n_prompts: int = 30
    n_candidates: int = 6
    d_prompt: int = 12
    d_response: int = 12
    p: int = 12
    q: int = 12
    prior_mean_norm: float = 1.0
    prior_scale: float = 0.3
    shift: float = 1.0
    feature_noise: float = 0.5
    feature_scale: float = 1.0
    interaction: float = 0.5
    max_length: int = 8
    ref_temperature: float = 1.0
    n_train_tasks: int = 8
    n_heldout_tasks: int = 4
    n_ft: int = 2000
    n_pref: int = 500
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_prompts, self.n_candidates, self.d_prompt, self.d_response, self.p,
                  self.q, self.max_length, self.n_train_tasks, self.n_heldout_tasks,
                  self.n_ft, self.n_pref)
        if min(counts) < 1:
            raise UsageError("all sizes and counts must be >= 1")
        if self.n_candidates < 2:
            raise UsageError("preference data needs at least 2 candidates per prompt")
        if not self.prior_scale > 0 or self.shift < 0 or self.feature_noise < 0:
            raise UsageError("prior_scale must be > 0 and shift, feature_noise >= 0")
        if not self.feature_scale > 0:
            raise UsageError("feature_scale must be > 0")
        if not self.ref_temperature > 0:
            raise UsageError("ref_temperature must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SharedStructure:
    prior_mean: np.ndarray  # (q,)
    shift_direction: np.ndarray  # (q,)
    response_map: np.ndarray  # (q, d_response)
    prompt_map: np.ndarray  # (q, d_prompt)
    policy_map: np.ndarray  # (p, q)


@lru_cache(maxsize=32)
def shared_structure(spec: MetaDistributionSpec) -> SharedStructure:
    rng = make_rng(spec.seed, 0)
    mean_dir = rng.normal(size=spec.q)
    mean_dir /= np.linalg.norm(mean_dir)
    shift_dir = rng.normal(size=spec.q)
    shift_dir /= np.linalg.norm(shift_dir)
    response_map = rng.normal(size=(spec.q, spec.d_response)) / np.sqrt(spec.d_response)
    prompt_map = rng.normal(size=(spec.q, spec.d_prompt)) / np.sqrt(spec.d_prompt)
    if spec.p == spec.q:
        policy_map, _ = np.linalg.qr(rng.normal(size=(spec.p, spec.q)))
    else:
        policy_map = rng.normal(size=(spec.p, spec.q)) / np.sqrt(spec.q)
    return SharedStructure(spec.prior_mean_norm * mean_dir, shift_dir, response_map,
                           prompt_map, policy_map)


def sample_task(spec: MetaDistributionSpec, split: str, rng: np.random.Generator,
                task_id: str = "task") -> TaskInstance:
    """Draw true weights, prompts and candidates; D_{y|x} is Boltzmann in r*."""
    if split not in SPLITS:
        raise UsageError(f"split must be one of {SPLITS}, got {split!r}")
    shared = shared_structure(spec)
    mean = shared.prior_mean + (spec.shift * shared.shift_direction if split == "heldout" else 0.0)
    weights = mean + spec.prior_scale * rng.normal(size=spec.q)
    n_x, n_y = spec.n_prompts, spec.n_candidates
    prompts = rng.normal(size=(n_x, spec.d_prompt))
    responses = rng.normal(size=(n_x, n_y, spec.d_response))
    base = responses @ shared.response_map.T  # (n_x, n_y, q)
    gate = 1.0 + spec.interaction * np.tanh(prompts @ shared.prompt_map.T)  # (n_x, q)
    reward_features = base * gate[:, None, :]
    noise = rng.normal(size=(n_x, n_y, spec.p))
    policy_features = reward_features @ shared.policy_map.T + spec.feature_noise * noise
    lengths = rng.integers(1, spec.max_length + 1, size=(n_x, n_y))
    prompt_probs = rng.dirichlet(np.full(n_x, 5.0))
    prompt_probs /= prompt_probs.sum()
    true_reward = reward_features @ weights
    response_probs = softmax(true_reward / spec.ref_temperature, axis=1)
    # rescaling features and weights together leaves r*, D and labels unchanged
    s = spec.feature_scale
    return TaskInstance(s * policy_features, s * reward_features, lengths, prompt_probs,
                        response_probs, true_weights=weights / s, task_id=task_id, split=split)


def gen_ft_data(task: TaskInstance, n: int, rng: np.random.Generator) -> Examples:
    """n i.i.d. pairs with x ~ D_x and y ~ D_{y|x}."""
    if n < 1:
        raise UsageError("n must be >= 1")
    x = rng.choice(task.n_prompts, size=n, p=task.prompt_probs)
    cdf = np.cumsum(task.response_probs[x], axis=1)
    u = rng.random(n)
    y = np.sum(cdf < (u * cdf[:, -1])[:, None], axis=1)
    # guard against u landing on a zero-probability tail slot through rounding
    y = np.minimum(y, task.n_candidates[x] - 1)
    return Examples(x, y)


def gen_pref_data(task: TaskInstance, n: int, rng: np.random.Generator) -> PreferencePairs:
    """x ~ D_x, two distinct uniform candidates, winner drawn from the BT law on r*."""
    if n < 1:
        raise UsageError("n must be >= 1")
    reachable = task.prompt_probs > 0
    if np.any(task.n_candidates[reachable] < 2):
        raise UsageError(f"task {task.task_id!r} has a prompt with fewer than 2 candidates")
    reward = task.true_reward()
    x = rng.choice(task.n_prompts, size=n, p=task.prompt_probs)
    k = task.n_candidates[x]
    y = np.floor(rng.random(n) * k).astype(np.int64)
    y_other = np.floor(rng.random(n) * (k - 1)).astype(np.int64)
    y_other += y_other >= y
    first_wins = rng.random(n) < logistic(reward[x, y] - reward[x, y_other])
    return PreferencePairs(x, np.where(first_wins, y, y_other), np.where(first_wins, y_other, y))


@dataclass(frozen=True, eq=False)
class TaskData:
    task: TaskInstance
    ft: Examples
    pref: PreferencePairs


def task_id_for(split: str, index: int) -> str:
    return f"{split}_{index:02d}"


def generate_task_data(spec: MetaDistributionSpec, split: str, index: int) -> TaskData:
    """One task with its datasets, from a stream keyed by (seed, split, index)."""
    stream = make_rng(spec.seed, 1 + SPLITS.index(split), index)
    task = sample_task(spec, split, stream, task_id=task_id_for(split, index))
    ft = gen_ft_data(task, spec.n_ft, stream)
    pref = gen_pref_data(task, spec.n_pref, stream)
    return TaskData(task, ft, pref)


def generate_suite(spec: MetaDistributionSpec) -> dict[str, list[TaskData]]:
    return {
        "train": [generate_task_data(spec, "train", i) for i in range(spec.n_train_tasks)],
        "heldout": [generate_task_data(spec, "heldout", i) for i in range(spec.n_heldout_tasks)],
    }

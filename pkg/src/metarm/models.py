"""Log-linear softmax policy and tanh-bounded reward model over finite tasks.

A task stores, for every prompt ``x`` and candidate slot ``y``, a policy
feature vector ``psi(x, y)`` and a reward feature vector ``psi_r(x, y)``.
Prompts may have different numbers of candidates; the candidate set of
prompt ``x`` is the first ``n_candidates[x]`` slots and the remaining slots
are padding that never receives probability mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, UsageError, log_sum_exp, softmax


@dataclass(frozen=True, eq=False)
class TaskInstance:
    policy_features: np.ndarray  # (n_x, n_y, p)
    reward_features: np.ndarray  # (n_x, n_y, q)
    lengths: np.ndarray  # (n_x, n_y) token counts |y|
    prompt_probs: np.ndarray  # D_x, (n_x,)
    response_probs: np.ndarray  # D_{y|x}, (n_x, n_y)
    n_candidates: np.ndarray | None = None
    true_weights: np.ndarray | None = None
    task_id: str = "task"
    split: str = "train"
    tabular: bool = False
    mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pf = np.asarray(self.policy_features, dtype=np.float64)
        rf = np.asarray(self.reward_features, dtype=np.float64)
        n_x, n_y = pf.shape[:2]
        if pf.ndim != 3 or rf.ndim != 3 or rf.shape[:2] != (n_x, n_y):
            raise UsageError("feature arrays must be (n_x, n_y, dim) with matching leading shape")
        nc = self.n_candidates
        nc = np.full(n_x, n_y, dtype=np.int64) if nc is None else np.asarray(nc, dtype=np.int64)
        if nc.shape != (n_x,) or np.any(nc < 1) or np.any(nc > n_y):
            raise UsageError("n_candidates must lie in [1, n_y] for every prompt")
        mask = np.arange(n_y)[None, :] < nc[:, None]
        lengths = np.asarray(self.lengths, dtype=np.int64)
        if lengths.shape != (n_x, n_y) or np.any(lengths[mask] < 1):
            raise UsageError("response lengths must be >= 1")
        px = np.asarray(self.prompt_probs, dtype=np.float64)
        py = np.where(mask, np.asarray(self.response_probs, dtype=np.float64), 0.0)
        if px.shape != (n_x,) or py.shape != (n_x, n_y):
            raise UsageError("distribution tables have the wrong shape")
        if np.any(px < 0) or abs(px.sum() - 1.0) > 1e-12:
            raise UsageError("D_x must be a normalized distribution")
        if np.any(py < 0) or np.max(np.abs(py.sum(axis=1) - 1.0)) > 1e-12:
            raise UsageError("every D_{y|x} row must be normalized")
        if not (np.all(np.isfinite(pf)) and np.all(np.isfinite(rf))):
            raise UsageError("features must be finite")
        tw = None if self.true_weights is None else np.asarray(self.true_weights, dtype=np.float64)
        if tw is not None and (tw.shape != (rf.shape[2],) or not np.all(np.isfinite(tw))):
            raise UsageError("true reward weights must be finite with dim q")
        for name, value in (
            ("policy_features", pf), ("reward_features", rf), ("lengths", lengths),
            ("prompt_probs", px), ("response_probs", py), ("n_candidates", nc),
            ("true_weights", tw), ("mask", mask),
        ):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_prompts(self) -> int:
        return self.policy_features.shape[0]

    @property
    def max_candidates(self) -> int:
        return self.policy_features.shape[1]

    @property
    def p(self) -> int:
        return self.policy_features.shape[2]

    @property
    def q(self) -> int:
        return self.reward_features.shape[2]

    @property
    def has_ground_truth(self) -> bool:
        return self.true_weights is not None

    def true_reward(self) -> np.ndarray:
        """r*(x, y) for every slot; padding slots are 0."""
        if self.true_weights is None:
            raise UsageError(f"task {self.task_id!r} has no ground-truth reward")
        return np.where(self.mask, self.reward_features @ self.true_weights, 0.0)

    def check_response(self, x: int, y: int) -> None:
        if not (0 <= x < self.n_prompts):
            raise DomainError(f"prompt {x} outside task with {self.n_prompts} prompts")
        if not (0 <= y < self.n_candidates[x]):
            raise DomainError(f"response {y} not in candidate set of prompt {x}")


@dataclass(frozen=True)
class RewardParams:
    phi: np.ndarray
    r_max: float = 1.0

    def __post_init__(self):
        phi = np.array(self.phi, dtype=np.float64)
        if phi.ndim != 1 or not np.all(np.isfinite(phi)):
            raise UsageError("phi must be a finite 1-d array")
        if not self.r_max > 0:
            raise UsageError("r_max must be positive")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    def with_phi(self, phi) -> "RewardParams":
        return RewardParams(phi, self.r_max)


def tabular_task(prompt_probs, response_probs, n_candidates=None, lengths=None,
                 true_reward=None, task_id="tabular", split="train") -> TaskInstance:
    """Task whose policy and reward features are one-hot over valid (x, y) cells.

    ``true_reward``, when given, is stored exactly as the ground-truth weights
    (one weight per valid cell).
    """
    response_probs = np.asarray(response_probs, dtype=np.float64)
    n_x, n_y = response_probs.shape
    nc = np.full(n_x, n_y) if n_candidates is None else np.asarray(n_candidates)
    mask = np.arange(n_y)[None, :] < nc[:, None]
    dim = int(mask.sum())
    feats = np.zeros((n_x, n_y, dim))
    feats[mask] = np.eye(dim)
    if lengths is None:
        lengths = np.ones((n_x, n_y), dtype=np.int64)
    weights = None
    if true_reward is not None:
        weights = np.asarray(true_reward, dtype=np.float64)[mask]
    return TaskInstance(feats, feats.copy(), lengths, prompt_probs, response_probs,
                        n_candidates=nc, true_weights=weights, task_id=task_id,
                        split=split, tabular=True)


def tabular_theta(task: TaskInstance, logits) -> np.ndarray:
    """Parameter vector of a tabular task that reproduces the given logits table."""
    if not task.tabular:
        raise UsageError("tabular parameterization requested for a non-tabular task")
    return np.asarray(logits, dtype=np.float64)[task.mask].copy()


# -- policy ------------------------------------------------------------------

def _prompt_probs_at(theta, feats):
    return softmax(feats @ theta)


def policy_logprob(theta, x: int, y: int, task: TaskInstance) -> float:
    task.check_response(x, y)
    k = task.n_candidates[x]
    scores = task.policy_features[x, :k] @ theta
    return float(scores[y] - log_sum_exp(scores))


def policy_logprobs(theta, task: TaskInstance) -> np.ndarray:
    """log pi_theta(y|x) for every slot; padding slots are -inf."""
    scores = np.where(task.mask, task.policy_features @ theta, -np.inf)
    return scores - log_sum_exp(scores, axis=1)[:, None]


def policy_probs(theta, task: TaskInstance) -> np.ndarray:
    return np.exp(policy_logprobs(theta, task))


def policy_grad(theta, x: int, y: int, task: TaskInstance) -> np.ndarray:
    """psi(x, y) - E_{y'' ~ pi_theta(.|x)} psi(x, y'')."""
    task.check_response(x, y)
    feats = task.policy_features[x, : task.n_candidates[x]]
    probs = _prompt_probs_at(theta, feats)
    return feats[y] - probs @ feats


def policy_hessian(theta, x: int, task: TaskInstance) -> np.ndarray:
    """Hessian of log pi_theta(y|x) in theta; the same for every y of prompt x."""
    task.check_response(x, 0)
    feats = task.policy_features[x, : task.n_candidates[x]]
    probs = _prompt_probs_at(theta, feats)
    mean = probs @ feats
    centered = feats - mean
    return -(centered.T * probs) @ centered


def policy_grad_and_hessian(theta, x: int, y: int, task: TaskInstance):
    feats = task.policy_features[x, : task.n_candidates[x]]
    probs = _prompt_probs_at(theta, feats)
    centered = feats - probs @ feats
    return centered[y], -(centered.T * probs) @ centered


# -- reward ------------------------------------------------------------------

def reward_value(phi: RewardParams, x: int, y: int, task: TaskInstance) -> float:
    """r_max * tanh(phi . psi_r(x, y))."""
    return float(phi.r_max * np.tanh(task.reward_features[x, y] @ phi.phi))


def reward_values(phi: RewardParams, task: TaskInstance) -> np.ndarray:
    """Reward for every slot; padding slots are 0."""
    r = phi.r_max * np.tanh(task.reward_features @ phi.phi)
    return np.where(task.mask, r, 0.0)


def reward_grad(phi: RewardParams, x: int, y: int, task: TaskInstance) -> np.ndarray:
    feats = task.reward_features[x, y]
    t = np.tanh(feats @ phi.phi)
    return phi.r_max * (1.0 - t * t) * feats

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metarm.core import make_rng
from metarm.models import RewardParams, TaskInstance, tabular_task

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_task(rng, n_x=3, n_y=4, p=5, q=4, ragged=False, task_id="t"):
    """Small dense task with random features, lengths and distributions."""
    nc = rng.integers(2, n_y + 1, size=n_x) if ragged else None
    mask = np.ones((n_x, n_y), bool) if nc is None else np.arange(n_y)[None, :] < nc[:, None]
    py = np.where(mask, rng.dirichlet(np.ones(n_y), size=n_x), 0.0)
    py /= py.sum(axis=1, keepdims=True)
    return TaskInstance(rng.normal(size=(n_x, n_y, p)), rng.normal(size=(n_x, n_y, q)),
                        rng.integers(1, 9, size=(n_x, n_y)), rng.dirichlet(np.ones(n_x)), py,
                        n_candidates=nc, true_weights=rng.normal(size=q), task_id=task_id)


def random_tabular(rng, n_x=3, n_y=4, ragged=False):
    nc = rng.integers(2, n_y + 1, size=n_x) if ragged else np.full(n_x, n_y)
    mask = np.arange(n_y)[None, :] < nc[:, None]
    py = np.where(mask, rng.dirichlet(np.ones(n_y), size=n_x), 0.0)
    py /= py.sum(axis=1, keepdims=True)
    return tabular_task(rng.dirichlet(np.full(n_x, 2.0)), py, n_candidates=nc,
                        true_reward=rng.normal(size=(n_x, n_y)))


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def task(rng):
    return random_task(rng)


@pytest.fixture
def phi(rng, task):
    return RewardParams(rng.normal(size=task.q), r_max=1.5)

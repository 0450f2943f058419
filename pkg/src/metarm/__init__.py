"""Bilevel meta-learning of a shared reward model for out-of-distribution
preference learning, on synthetic log-linear tasks with exact oracles."""

__version__ = "0.1.0"

from .core import DomainError, HyperParams, UsageError  # noqa: E402
from .models import RewardParams, TaskInstance  # noqa: E402

__all__ = ["DomainError", "HyperParams", "RewardParams", "TaskInstance", "UsageError",
           "__version__"]

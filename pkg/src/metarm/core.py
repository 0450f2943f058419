"""Shared value types, stable numerics and seeded randomness."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

FORMAT_VERSION = 1


class UsageError(ValueError):
    """Bad arguments or configuration (CLI exit code 1)."""


class DomainError(ValueError):
    """A response or pair that is not part of the prompt's candidate set."""


class Example(NamedTuple):
    """A single fine-tuning sample z = (x, y), as indices into a task."""

    x: int
    y: int


class PreferencePair(NamedTuple):
    """A comparison at prompt ``x`` where ``preferred`` beats ``dispreferred``."""

    x: int
    preferred: int
    dispreferred: int


@dataclass(frozen=True)
class Examples:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.int64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise UsageError("Examples needs two equal-length 1-d index arrays")

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i) -> Example:
        return Example(int(self.x[i]), int(self.y[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "Examples":
        return Examples(self.x[idx], self.y[idx])


@dataclass(frozen=True)
class PreferencePairs:
    x: np.ndarray
    preferred: np.ndarray
    dispreferred: np.ndarray

    def __post_init__(self):
        for name in ("x", "preferred", "dispreferred"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if not (self.x.shape == self.preferred.shape == self.dispreferred.shape):
            raise UsageError("PreferencePairs arrays must have equal length")
        if np.any(self.preferred == self.dispreferred):
            raise DomainError("preferred and dispreferred responses must differ")

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i) -> PreferencePair:
        return PreferencePair(int(self.x[i]), int(self.preferred[i]), int(self.dispreferred[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "PreferencePairs":
        return PreferencePairs(self.x[idx], self.preferred[idx], self.dispreferred[idx])

    def flipped(self) -> "PreferencePairs":
        return PreferencePairs(self.x, self.dispreferred, self.preferred)

    @classmethod
    def concat(cls, parts) -> "PreferencePairs":
        parts = list(parts)
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.preferred for p in parts]),
            np.concatenate([p.dispreferred for p in parts]),
        )


@dataclass(frozen=True)
class HyperParams:
    """Bilevel step sizes and loop lengths.

    ``ridge`` adds ``ridge/2 * |theta|^2`` to the inner fine-tuning loss only.
    """

    alpha: float = 0.05
    eta: float = 0.5
    beta: float = 2.0
    inner_steps: int = 50
    outer_steps: int = 400
    seed: int = 0
    ridge: float = 0.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.eta >= 0 and self.beta > 0):
            raise UsageError("alpha and beta must be > 0 and eta >= 0")
        if self.inner_steps < 0 or self.outer_steps < 0:
            raise UsageError("inner_steps and outer_steps must be >= 0")
        if self.ridge < 0:
            raise UsageError("ridge must be >= 0")


def logistic(u):
    """1 / (1 + exp(-u)), evaluated without overflow for any finite input."""
    u = np.asarray(u, dtype=np.float64)
    e = np.exp(-np.abs(u))
    out = np.where(u >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out[()] if out.ndim == 0 else out


def log_logistic(u):
    """log(logistic(u)) = -log1p(exp(-u)), stable on both tails."""
    u = np.asarray(u, dtype=np.float64)
    out = np.minimum(u, 0.0) - np.log1p(np.exp(-np.abs(u)))
    return out[()] if out.ndim == 0 else out


def log_sum_exp(scores, axis=None):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise UsageError("log_sum_exp of an empty array")
    m = np.max(scores, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):  # all -inf gives log 0 = -inf
        out = np.log(np.sum(np.exp(scores - m), axis=axis, keepdims=True)) + m
    out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out[()] if out.ndim == 0 else out


def softmax(scores, axis=-1):
    scores = np.asarray(scores, dtype=np.float64)
    m = np.max(scores, axis=axis, keepdims=True)
    e = np.exp(scores - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def make_rng(seed, *spawn_key) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``seed`` and an optional integer path.

    The same (seed, spawn_key) always yields the same stream, so independent
    workers can derive their own generators without sharing state.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in spawn_key))
    return np.random.Generator(np.random.PCG64(ss))


def kl_divergence(p, q, axis=-1):
    """KL(p || q) with the 0 log 0 = 0 convention; +inf where q = 0 < p."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return np.sum(terms, axis=axis)

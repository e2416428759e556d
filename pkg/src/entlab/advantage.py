"""Group reward -> advantage estimators and zero-variance prompt filtering."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

ESTIMATORS = ("reinforce", "grpo", "rloo")


class ZeroVarianceError(ValueError):
    """GRPO standardization of a group whose rewards are all equal."""


def grpo_advantage(rewards: Sequence[float]) -> np.ndarray:
    """Standardize rewards within the group using the population std (divide by K)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need K >= 2 rewards")
    std = r.std()
    if std == 0.0:
        raise ZeroVarianceError("zero reward variance in group; filter_prompts should have removed it")
    return (r - r.mean()) / std


def rloo_advantage(rewards: Sequence[float], rescale: bool = False) -> np.ndarray:
    """Reward minus the mean of the other K-1 rewards.

    ``rescale`` multiplies by (K-1)/K, which turns the estimate into ``r - mean(r)``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    k = r.size
    if k < 2:
        raise ValueError("need K >= 2 rewards")
    adv = r - (r.sum() - r) / (k - 1)
    return adv * (k - 1) / k if rescale else adv


def reinforce_advantage(rewards: Sequence[float]) -> np.ndarray:
    return np.asarray(rewards, dtype=np.float64).copy()


def compute_advantage(rewards: Sequence[float], estimator: str) -> np.ndarray:
    if estimator == "grpo":
        return grpo_advantage(rewards)
    if estimator == "rloo":
        return rloo_advantage(rewards)
    if estimator == "reinforce":
        return reinforce_advantage(rewards)
    raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


@dataclass
class AdvantageBatch:
    """Per-response advantages broadcast to every token of the response."""

    estimator: str
    response_advantages: np.ndarray  # (n_responses,)
    lengths: np.ndarray  # tokens per response

    @property
    def token_advantages(self) -> np.ndarray:
        return np.repeat(self.response_advantages, self.lengths)

    @classmethod
    def from_groups(cls, groups, estimator: str) -> "AdvantageBatch":
        adv = [compute_advantage(g.rewards, estimator) for g in groups]
        lengths = [g.responses.shape[1] for g in groups for _ in range(g.K)]
        flat = np.concatenate(adv) if adv else np.zeros(0)
        return cls(estimator, flat, np.asarray(lengths, dtype=np.int64))


def filter_prompts(groups):
    """Drop groups whose rewards are all equal (all correct or all incorrect)."""
    kept = [g for g in groups if np.ptp(np.asarray(g.rewards)) > 0]
    if not kept:
        log.warning("filter_prompts removed every group")
    return kept

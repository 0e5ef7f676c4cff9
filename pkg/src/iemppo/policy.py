"""Diagonal Gaussian policy with a reward-driven exploration schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError
from .nn import MlpSpec, ParamSet, mlp_forward

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianPolicy:
    spec: MlpSpec
    theta: ParamSet
    action_low: np.ndarray
    action_high: np.ndarray

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.action_high, dtype=np.float64)
        if self.action_low.shape != (self.spec.output_dim,) or self.action_high.shape != (
            self.spec.output_dim,
        ):
            raise ShapeError("action bounds must match the network output width")
        if not np.all(self.action_low < self.action_high):
            raise ConfigError("action_low must be strictly below action_high")

    def mean(self, states) -> np.ndarray:
        return mlp_forward(self.spec, self.theta, states)


class ActionSample(NamedTuple):
    action: np.ndarray  # clamped to the action bounds, sent to the environment
    log_prob: float  # of ``sample`` under N(mean, sigma^2)
    mean: np.ndarray
    sample: np.ndarray  # unclamped draw


def log_prob(mean, sigma, action) -> np.ndarray | float:
    """Diagonal Gaussian log-density, summed over the last axis.

    ``sigma`` may be a scalar or broadcast against ``mean``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mean.shape)
    if mean.shape != action.shape:
        raise ShapeError(f"mean {mean.shape} and action {action.shape} differ")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    z = (action - mean) / sigma
    terms = -0.5 * (z * z + 2.0 * np.log(sigma) + LOG_2PI)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def act(policy: GaussianPolicy, state, sigma: float, rng: np.random.Generator) -> ActionSample:
    state = np.asarray(state, dtype=np.float64)
    if not np.isfinite(state).all():
        raise NonFiniteError(f"non-finite state {state}")
    mu = policy.mean(state)
    if sigma == 0:
        return ActionSample(np.clip(mu, policy.action_low, policy.action_high), 0.0, mu, mu)
    sample = mu + sigma * rng.standard_normal(mu.shape[-1])
    lp = log_prob(mu, sigma, sample)
    return ActionSample(np.clip(sample, policy.action_low, policy.action_high), lp, mu, sample)


@dataclass(frozen=True)
class SigmaSchedule:
    """Exploration noise that shrinks as the running episode return improves.

    sigma is linear in the running return between ``reward_low`` (sigma_init)
    and ``reward_high`` (sigma_min), and never increases.
    """

    sigma_init: float
    sigma_min: float
    reward_low: float
    reward_high: float
    running_reward: float | None = None
    current_sigma: float | None = None
    decay: float = 0.99

    def __post_init__(self):
        if not self.sigma_init > 0 or not self.sigma_min > 0:
            raise ConfigError("sigma_init and sigma_min must be positive")
        if self.sigma_min > self.sigma_init:
            raise ConfigError("sigma_min must not exceed sigma_init")
        if not self.reward_high > self.reward_low:
            raise ConfigError("reward_high must be greater than reward_low")
        if self.running_reward is None:
            object.__setattr__(self, "running_reward", float(self.reward_low))
        if self.current_sigma is None:
            object.__setattr__(self, "current_sigma", float(self.sigma_init))

    def target_sigma(self, running_reward: float) -> float:
        frac = (running_reward - self.reward_low) / (self.reward_high - self.reward_low)
        frac = min(max(frac, 0.0), 1.0)
        sigma = self.sigma_init + (self.sigma_min - self.sigma_init) * frac
        return min(max(sigma, self.sigma_min), self.sigma_init)  # rounding can overshoot the anchors


def update_sigma(schedule: SigmaSchedule, latest_episode_return: float) -> SigmaSchedule:
    running = schedule.decay * schedule.running_reward + (1.0 - schedule.decay) * latest_episode_return
    sigma = min(schedule.current_sigma, schedule.target_sigma(running))
    return replace(schedule, running_reward=running, current_sigma=sigma)

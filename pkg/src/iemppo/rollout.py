"""Trajectory collection and Monte-Carlo training targets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .envs import Env
from .policy import GaussianPolicy, act

# (state, env_action, next_state) -> intrinsic reward for that transition
BonusHook = Callable[[np.ndarray, np.ndarray, np.ndarray], float]


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray  # unclamped policy sample; log_prob_old refers to this
    extrinsic_reward: float
    log_prob_old: float
    terminated: bool
    truncated: bool
    next_state: np.ndarray
    env_action: np.ndarray | None = None
    intrinsic_reward: float = 0.0


@dataclass
class Trajectory:
    transitions: list[Transition] = field(default_factory=list)

    def __len__(self):
        return len(self.transitions)

    @property
    def episode_return(self) -> float:
        return float(sum(t.extrinsic_reward for t in self.transitions))

    @property
    def terminated(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].terminated

    @property
    def truncated(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].truncated

    def states(self) -> np.ndarray:
        return np.array([t.state for t in self.transitions])

    def actions(self) -> np.ndarray:
        return np.array([t.action for t in self.transitions])

    def env_actions(self) -> np.ndarray:
        return np.array([t.env_action if t.env_action is not None else t.action for t in self.transitions])

    def next_states(self) -> np.ndarray:
        return np.array([t.next_state for t in self.transitions])

    def state_sequence(self) -> np.ndarray:
        """Every visited state in order, including the final next_state."""
        return np.vstack([self.states(), self.transitions[-1].next_state[None, :]])

    def total_rewards(self) -> np.ndarray:
        return np.array([t.extrinsic_reward + t.intrinsic_reward for t in self.transitions])


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray

    def __len__(self):
        return len(self.log_probs_old)


def collect(
    policy: GaussianPolicy,
    sigma: float,
    env: Env,
    min_steps: int,
    rng: np.random.Generator,
    env_rng: np.random.Generator | None = None,
    intrinsic: BonusHook | None = None,
) -> list[Trajectory]:
    """Run whole episodes until at least ``min_steps`` transitions are stored.

    ``rng`` drives action noise, ``env_rng`` the episode resets (defaults to
    ``rng``).  ``intrinsic`` is called once per transition.
    """
    if min_steps < 1:
        raise ValueError("min_steps must be >= 1")
    env_rng = rng if env_rng is None else env_rng
    trajectories: list[Trajectory] = []
    count = 0
    while count < min_steps:
        traj = Trajectory()
        state = env.reset(env_rng)
        while True:
            step = act(policy, state, sigma, rng)
            res = env.step(step.action)
            bonus = 0.0 if intrinsic is None else float(intrinsic(state, step.action, res.next_state))
            traj.transitions.append(Transition(
                state, step.sample, res.reward, step.log_prob,
                res.terminated, res.truncated, res.next_state, step.action, bonus,
            ))
            state = res.next_state
            if res.terminated or res.truncated:
                break
        trajectories.append(traj)
        count += len(traj)
    return trajectories


def reward_to_go(traj: Trajectory, gamma: float, value_fn: Callable[[np.ndarray], float]) -> np.ndarray:
    """Discounted return from every step; time-limit endings bootstrap from the critic."""
    rewards = traj.total_rewards()
    tail = float(value_fn(traj.transitions[-1].next_state)) if traj.truncated else 0.0
    out = np.empty(len(rewards))
    running = tail
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def advantages(returns, values, normalize: bool = True) -> np.ndarray:
    returns = np.asarray(returns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if returns.size == 0:
        raise ValueError("advantages of an empty batch")
    if returns.shape != values.shape:
        raise ValueError(f"returns {returns.shape} and values {values.shape} differ")
    adv = returns - values
    if normalize:
        if adv.size < 2:
            raise ValueError("normalization needs at least two samples")
        # floor instead of an additive epsilon keeps the std exactly 1 for real batches
        adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    return adv


def build_batch(
    trajectories: Sequence[Trajectory],
    gamma: float,
    value_fn: Callable[[np.ndarray], np.ndarray],
    normalize: bool = True,
) -> Batch:
    """Flatten trajectories into training arrays.  ``value_fn`` is batched."""
    states = np.vstack([tr.states() for tr in trajectories])
    actions = np.vstack([tr.actions() for tr in trajectories])
    logp = np.array([t.log_prob_old for tr in trajectories for t in tr.transitions])
    returns = np.concatenate([
        reward_to_go(tr, gamma, lambda s: value_fn(s[None, :])[0]) for tr in trajectories
    ])
    values = value_fn(states)
    return Batch(states, actions, logp, returns, advantages(returns, values, normalize))

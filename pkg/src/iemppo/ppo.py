"""Clipped-surrogate policy optimization with optional exploration bonuses."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .envs import Env
from .errors import ConfigError, NonFiniteError
from .intrinsic import (
    CuriosityModule,
    UncertaintyModule,
    icm_bonus,
    icm_update,
    iem_bonus,
    iem_pairs,
    iem_update,
    make_curiosity,
    make_uncertainty,
)
from .metrics import EpisodeRecord, MetricsRow
from .nn import AdamState, MlpSpec, ParamSet, _trace, adam_step, init_params, mlp_backward, mlp_forward
from .policy import LOG_2PI, GaussianPolicy, SigmaSchedule, update_sigma
from .rollout import Batch, build_batch, collect

ALGOS = ("ppo", "icm-ppo", "iem-ppo")


class TrainingError(NonFiniteError):
    """A loss or gradient became non-finite during an update."""


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    epochs: int = 80
    minibatch_size: int = 64
    policy_lr: float = 0.0003
    value_lr: float = 0.001
    kl_limit: float = 0.015
    normalize_advantages: bool = True

    def __post_init__(self):
        # clip_epsilon = inf is allowed: it turns the update into plain policy gradient
        if not (self.clip_epsilon > 0 and (self.clip_epsilon < 1 or math.isinf(self.clip_epsilon))):
            raise ConfigError(f"clip_epsilon must be in (0, 1), got {self.clip_epsilon}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ConfigError("epochs and minibatch_size must be >= 1")
        if self.policy_lr <= 0 or self.value_lr <= 0 or self.kl_limit <= 0:
            raise ConfigError("learning rates and kl_limit must be positive")


def clip_objective(ratio, advantage, epsilon):
    """Per-sample clipped surrogate ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    out = np.minimum(ratio * advantage, np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage)
    return float(out) if out.ndim == 0 else out


def _batch_log_prob(mu, actions, sigma):
    diff = actions - mu
    d = mu.shape[1]
    return -0.5 * np.sum(diff * diff, axis=1) / sigma**2 - d * (math.log(sigma) + 0.5 * LOG_2PI), diff


def surrogate_grad(
    policy: GaussianPolicy, states, actions, log_probs_old, adv, sigma: float, epsilon: float,
    trace=None,
) -> tuple[ParamSet, float, np.ndarray]:
    """Gradient (ascent direction) of the mean clipped surrogate w.r.t. the policy mean net.

    Returns ``(grads, objective, ratio)``.
    """
    return _surrogate_grad(policy.spec, policy.theta, states, actions, log_probs_old, adv,
                           sigma, epsilon, trace)


def _surrogate_grad(spec, theta, states, actions, log_probs_old, adv, sigma, epsilon, trace=None):
    if trace is None:
        trace = _trace(spec, theta, states)
    logp, diff = _batch_log_prob(trace[-1], actions, sigma)
    ratio = np.exp(logp - log_probs_old)
    obj = clip_objective(ratio, adv, epsilon)
    # the clipped branch is selected (and flat) only outside the band in the improving direction
    clipped = ((adv > 0) & (ratio > 1.0 + epsilon)) | ((adv < 0) & (ratio < 1.0 - epsilon))
    d_ratio = np.where(clipped, 0.0, adv)
    d_mu = (d_ratio * ratio)[:, None] * diff / sigma**2
    d_mu *= 1.0 / len(adv)
    grads, _ = mlp_backward(spec, theta, states, d_mu, trace=trace, input_grad=False)
    return grads, float(np.mean(obj)), ratio


def _negate(p: ParamSet) -> ParamSet:
    return ParamSet.from_flat(-p.flat, p.shapes)


class PolicyUpdate(NamedTuple):
    policy: GaussianPolicy
    adam: AdamState
    epochs_run: int
    final_kl: float
    loss: float


def policy_update(
    policy: GaussianPolicy,
    batch: Batch,
    sigma: float,
    cfg: PpoConfig,
    adam: AdamState,
    rng: np.random.Generator,
    iteration: int = 0,
) -> PolicyUpdate:
    """Multi-epoch minibatch ascent on the clipped surrogate with KL early stopping.

    sigma is fixed by the schedule, so only the mean network moves.  The KL
    estimate ``mean(logp_old - logp_new)`` is checked after every full epoch.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    spec, theta = policy.spec, policy.theta
    epochs_run, kl, loss = 0, 0.0, 0.0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for mb, start in enumerate(range(0, n, cfg.minibatch_size)):
            idx = order[start:start + cfg.minibatch_size]
            grads, obj, _ = _surrogate_grad(
                spec, theta, batch.states[idx], batch.actions[idx], batch.log_probs_old[idx],
                batch.advantages[idx], sigma, cfg.clip_epsilon,
            )
            if not math.isfinite(obj):
                raise TrainingError(
                    f"non-finite policy objective at iteration {iteration}, epoch {epoch}, minibatch {mb}"
                )
            try:
                theta, adam = adam_step(theta, _negate(grads), adam)
            except NonFiniteError as exc:
                raise TrainingError(
                    f"{exc} at iteration {iteration}, epoch {epoch}, minibatch {mb}"
                ) from exc
        epochs_run = epoch + 1
        mu = mlp_forward(spec, theta, batch.states)
        logp, _ = _batch_log_prob(mu, batch.actions, sigma)
        kl = float(np.mean(batch.log_probs_old - logp))
        ratio = np.exp(logp - batch.log_probs_old)
        loss = -float(np.mean(clip_objective(ratio, batch.advantages, cfg.clip_epsilon)))
        if kl > cfg.kl_limit:
            break
    new_policy = GaussianPolicy(spec, theta, policy.action_low, policy.action_high)
    return PolicyUpdate(new_policy, adam, epochs_run, kl, loss)


@dataclass
class ValueFunction:
    spec: MlpSpec
    phi: ParamSet

    def __call__(self, states) -> np.ndarray:
        out = mlp_forward(self.spec, self.phi, states)
        return out[..., 0]


class ValueUpdate(NamedTuple):
    value: ValueFunction
    adam: AdamState
    loss_trace: list[float]


def value_update(
    value: ValueFunction,
    states,
    returns,
    cfg: PpoConfig,
    adam: AdamState,
    rng: np.random.Generator,
    iteration: int = 0,
) -> ValueUpdate:
    """Minibatch Adam descent on ``mean (R - V(s))^2`` for ``cfg.epochs`` epochs.

    ``loss_trace`` holds the mean minibatch loss seen during each epoch.
    """
    states = np.asarray(states, dtype=np.float64)
    targets = np.asarray(returns, dtype=np.float64)
    if len(states) != len(targets):
        raise ValueError("states and returns differ in length")
    spec, phi = value.spec, value.phi
    n = len(targets)
    trace_out = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for mb, start in enumerate(range(0, n, cfg.minibatch_size)):
            idx = order[start:start + cfg.minibatch_size]
            x = states[idx]
            tr = _trace(spec, phi, x)
            err = tr[-1][:, 0] - targets[idx]
            mb_loss = float(np.mean(err * err))
            if not math.isfinite(mb_loss):
                raise TrainingError(
                    f"non-finite value loss at iteration {iteration}, epoch {epoch}, minibatch {mb}"
                )
            total += mb_loss * len(idx)
            grads, _ = mlp_backward(spec, phi, x, (2.0 * err / len(idx))[:, None], trace=tr,
                                    input_grad=False)
            phi, adam = adam_step(phi, grads, adam)
        trace_out.append(total / n)
    return ValueUpdate(ValueFunction(spec, phi), adam, trace_out)


# -- one full training iteration ------------------------------------------------

STREAMS = ("policy_init", "value_init", "intrinsic_init", "env", "noise", "shuffle",
           "intrinsic_shuffle", "pairs")


@dataclass
class AlgoState:
    algo: str
    policy: GaussianPolicy
    value: ValueFunction
    policy_adam: AdamState
    value_adam: AdamState
    schedule: SigmaSchedule
    streams: dict[str, np.random.Generator]
    curiosity: CuriosityModule | None = None
    uncertainty: UncertaintyModule | None = None
    iteration: int = 0
    env_steps: int = 0
    episodes: list[EpisodeRecord] = field(default_factory=list)


def make_algo_state(
    env: Env,
    algo: str,
    streams: dict[str, np.random.Generator],
    cfg: PpoConfig,
    schedule: SigmaSchedule,
    hidden: tuple[int, ...] = (64, 64),
    c1: float = 0.05,
    beta: float = 0.2,
    n_max: int = 16,
    bonus_offset: float = 0.0,
    intrinsic_lr: float = 0.001,
    standardize_intrinsic: bool = False,
) -> AlgoState:
    if algo not in ALGOS:
        raise ConfigError(f"unknown algo {algo!r}; choose from {ALGOS}")
    pspec = MlpSpec(env.state_dim, hidden, env.action_dim)
    vspec = MlpSpec(env.state_dim, hidden, 1)
    theta = init_params(pspec, streams["policy_init"])
    phi = init_params(vspec, streams["value_init"])
    policy = GaussianPolicy(pspec, theta, env.action_low, env.action_high)
    state = AlgoState(
        algo, policy, ValueFunction(vspec, phi),
        AdamState.create(theta, cfg.policy_lr), AdamState.create(phi, cfg.value_lr),
        schedule, streams,
    )
    if algo == "icm-ppo":
        state.curiosity = make_curiosity(
            env.state_dim, env.action_dim, streams["intrinsic_init"], beta=beta, lr=intrinsic_lr
        )
    elif algo == "iem-ppo":
        bounds = (env.state_low, env.state_high) if standardize_intrinsic else (None, None)
        state.uncertainty = make_uncertainty(
            env.state_dim, streams["intrinsic_init"], c1=c1, n_max=n_max, lr=intrinsic_lr,
            bonus_offset=bonus_offset, state_low=bounds[0], state_high=bounds[1],
        )
    return state


def _bonus_hook(state: AlgoState):
    if state.curiosity is not None:
        module = state.curiosity
        return lambda s, a, s_next: icm_bonus(module, s, a, s_next)
    if state.uncertainty is not None:
        module = state.uncertainty
        return lambda s, a, s_next: iem_bonus(module, s, s_next)
    return None


def train_iteration(
    state: AlgoState, env: Env, cfg: PpoConfig, steps_per_iteration: int, clock=time.perf_counter,
) -> MetricsRow:
    """Collect, build targets, update policy/value/bonus module, then adapt sigma.

    Mutates ``state`` in place and returns the iteration's metrics.
    """
    t0 = clock()
    streams = state.streams
    sigma = state.schedule.current_sigma
    trajs = collect(
        state.policy, sigma, env, steps_per_iteration,
        rng=streams["noise"], env_rng=streams["env"], intrinsic=_bonus_hook(state),
    )
    batch = build_batch(trajs, cfg.gamma, state.value, cfg.normalize_advantages)

    pu = policy_update(state.policy, batch, sigma, cfg, state.policy_adam, streams["shuffle"],
                       iteration=state.iteration)
    vu = value_update(state.value, batch.states, batch.returns, cfg, state.value_adam,
                      streams["shuffle"], iteration=state.iteration)
    state.policy, state.policy_adam = pu.policy, pu.adam
    state.value, state.value_adam = vu.value, vu.adam

    loss_intrinsic = 0.0
    if state.curiosity is not None:
        s = np.vstack([t.states() for t in trajs])
        a = np.vstack([t.env_actions() for t in trajs])
        s2 = np.vstack([t.next_states() for t in trajs])
        state.curiosity, loss_intrinsic = icm_update(
            state.curiosity, s, a, s2, streams["intrinsic_shuffle"], cfg.minibatch_size)
    elif state.uncertainty is not None:
        starts, ends, n = iem_pairs(trajs, state.uncertainty.n_max, streams["pairs"])
        state.uncertainty, loss_intrinsic = iem_update(
            state.uncertainty, starts, ends, n, streams["intrinsic_shuffle"], cfg.minibatch_size)

    returns = []
    for traj in trajs:
        state.env_steps += len(traj)
        ret = traj.episode_return
        returns.append(ret)
        state.episodes.append(EpisodeRecord(
            len(state.episodes), state.env_steps, len(traj), ret, traj.terminated))
        state.schedule = update_sigma(state.schedule, ret)

    bonus = np.array([t.intrinsic_reward for traj in trajs for t in traj.transitions])
    loss_v = float(np.mean((state.value(batch.states) - batch.returns) ** 2))
    state.iteration += 1
    return MetricsRow(
        iteration=state.iteration,
        env_steps=state.env_steps,
        ret_mean=float(np.mean(returns)),
        ret_min=float(np.min(returns)),
        ret_max=float(np.max(returns)),
        bonus_mean=float(bonus.mean()),
        sigma=float(sigma),
        epochs_run=pu.epochs_run,
        kl=pu.final_kl,
        loss_pi=pu.loss,
        loss_v=loss_v,
        loss_intrinsic=float(loss_intrinsic),
        seconds=clock() - t0,
    )

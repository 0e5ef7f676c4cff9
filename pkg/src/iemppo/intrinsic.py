"""Exploration bonuses: forward-model curiosity and step-count uncertainty.

The uncertainty module regresses the number of environment steps ``n`` that
separate two states.  At collection time it scores a single transition
``(s_t, s_{t+1})``; the true answer is always 1, so a large prediction flags a
transition the learner has rarely seen.  :class:`CountTable` is the tabular
visit-count bonus the network is meant to track, kept as a test oracle.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError
from .nn import AdamState, MlpSpec, ParamSet, adam_step, init_params, mlp_backward, mlp_forward
from .nn import _trace
from .rollout import Trajectory


def _minibatches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _regression_epoch(spec, params, adam, inputs, targets, minibatch_size, rng):
    """One shuffled pass of Adam on mean squared error (summed over outputs)."""
    losses = []
    for idx in _minibatches(len(inputs), minibatch_size, rng):
        x = inputs[idx]
        trace = _trace(spec, params, x)
        err = trace[-1] - targets[idx]
        losses.append(float(np.mean(np.sum(err * err, axis=1))))
        grads, _ = mlp_backward(spec, params, x, 2.0 * err / len(idx), trace=trace, input_grad=False)
        params, adam = adam_step(params, grads, adam)
    return params, adam, float(np.mean(losses))


# -- curiosity ---------------------------------------------------------------


@dataclass
class CuriosityModule:
    spec: MlpSpec
    psi: ParamSet
    beta: float
    adam: AdamState

    @property
    def state_dim(self) -> int:
        return self.spec.output_dim

    @property
    def action_dim(self) -> int:
        return self.spec.input_dim - self.spec.output_dim


def make_curiosity(
    state_dim: int,
    action_dim: int,
    rng: np.random.Generator,
    beta: float = 0.2,
    lr: float = 0.001,
    hidden: int = 32,
) -> CuriosityModule:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    spec = MlpSpec(state_dim + action_dim, (hidden,), state_dim)
    psi = init_params(spec, rng)
    return CuriosityModule(spec, psi, float(beta), AdamState.create(psi, lr))


def _forward_inputs(module: CuriosityModule, s, a, s_next):
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
    if s.shape[1] != module.state_dim or s_next.shape != s.shape or a.shape != (len(s), module.action_dim):
        raise ShapeError(f"curiosity input shapes s{s.shape} a{a.shape} s'{s_next.shape}")
    return np.hstack([s, a]), s_next


def icm_prediction_error(module: CuriosityModule, s, a, s_next) -> np.ndarray:
    x, target = _forward_inputs(module, s, a, s_next)
    err = mlp_forward(module.spec, module.psi, x) - target
    return np.sum(err * err, axis=1)


def icm_bonus(module: CuriosityModule, s, a, s_next):
    """``beta * ||f(s, a) - s'||^2``; scalar for a single transition."""
    scalar = np.asarray(s).ndim == 1
    bonus = module.beta * icm_prediction_error(module, s, a, s_next)
    return float(bonus[0]) if scalar else bonus


def icm_update(
    module: CuriosityModule, states, actions, next_states, rng: np.random.Generator,
    minibatch_size: int = 64,
) -> tuple[CuriosityModule, float]:
    """One epoch of forward-model regression.  Returns the module and mean loss."""
    if len(states) == 0:
        raise ValueError("icm_update needs at least one transition")
    x, target = _forward_inputs(module, states, actions, next_states)
    psi, adam, loss = _regression_epoch(module.spec, module.psi, module.adam, x, target, minibatch_size, rng)
    return replace(module, psi=psi, adam=adam), loss


# -- step-count uncertainty ---------------------------------------------------


@dataclass
class UncertaintyModule:
    spec: MlpSpec
    xi: ParamSet
    c1: float
    n_max: int
    adam: AdamState
    bonus_offset: float = 0.0
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    @property
    def state_dim(self) -> int:
        return self.spec.input_dim // 2


def make_uncertainty(
    state_dim: int,
    rng: np.random.Generator,
    c1: float = 0.05,
    n_max: int = 16,
    lr: float = 0.001,
    hidden: Sequence[int] = (64, 64),
    bonus_offset: float = 0.0,
    state_low=None,
    state_high=None,
) -> UncertaintyModule:
    """Build the step-count regressor.

    Passing ``state_low``/``state_high`` turns on input standardization: each
    state coordinate is mapped affinely from its bounds onto [-1, 1].
    """
    if c1 < 0:
        raise ValueError("c1 must be non-negative")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    spec = MlpSpec(2 * state_dim, tuple(hidden), 1)
    xi = init_params(spec, rng)
    shift = scale = None
    if state_low is not None and state_high is not None:
        lo = np.asarray(state_low, dtype=np.float64)
        hi = np.asarray(state_high, dtype=np.float64)
        shift = np.tile((hi + lo) / 2.0, 2)
        scale = np.tile((hi - lo) / 2.0, 2)
    return UncertaintyModule(spec, xi, float(c1), int(n_max), AdamState.create(xi, lr),
                             float(bonus_offset), shift, scale)


def _pair_inputs(module: UncertaintyModule, s, s_later) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    s_later = np.atleast_2d(np.asarray(s_later, dtype=np.float64))
    if s.shape != s_later.shape or s.shape[1] != module.state_dim:
        raise ShapeError(f"uncertainty input shapes {s.shape} and {s_later.shape}")
    x = np.hstack([s, s_later])
    if module.input_shift is not None:
        x = (x - module.input_shift) / module.input_scale
    return x


def predict_steps(module: UncertaintyModule, s, s_later) -> np.ndarray:
    """Raw network estimate of the number of steps from ``s`` to ``s_later``."""
    return mlp_forward(module.spec, module.xi, _pair_inputs(module, s, s_later))[:, 0]


def iem_bonus(module: UncertaintyModule, s, s_next):
    """``c1 * clip(N, 0, n_max)`` for the transition ``s -> s_next``.

    A non-zero ``bonus_offset`` subtracts that floor from the clipped estimate
    (never going below zero).
    """
    scalar = np.asarray(s).ndim == 1
    n_hat = np.clip(predict_steps(module, s, s_next), 0.0, module.n_max)
    if module.bonus_offset:
        n_hat = np.maximum(n_hat - module.bonus_offset, 0.0)
    bonus = module.c1 * n_hat
    return float(bonus[0]) if scalar else bonus


def iem_pairs(
    trajectories: Iterable[Trajectory], n_max: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample one ``(s_t, s_{t+n}, n)`` per start index, never crossing episodes.

    The state sequence of a T-step episode has T+1 entries (the final
    next_state included); from 0-based index t < T, n is uniform on
    1..min(n_max, T - t).
    Returns stacked arrays ``(starts, ends, n)``.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    starts, ends, ns = [], [], []
    for traj in trajectories:
        if len(traj) == 0:
            continue
        seq = traj.state_sequence()
        length = len(seq)
        t = np.arange(length - 1)
        upper = np.minimum(n_max, length - 1 - t)
        n = rng.integers(1, upper + 1)
        starts.append(seq[t])
        ends.append(seq[t + n])
        ns.append(n)
    if not ns:
        return np.empty((0, 0)), np.empty((0, 0)), np.empty(0, dtype=np.int64)
    return np.vstack(starts), np.vstack(ends), np.concatenate(ns)


def iem_update(
    module: UncertaintyModule, starts, ends, n, rng: np.random.Generator,
    minibatch_size: int = 64,
) -> tuple[UncertaintyModule, float]:
    """One epoch regressing predicted step counts onto the sampled ``n``."""
    if len(n) == 0:
        raise ValueError("iem_update needs at least one pair")
    x = _pair_inputs(module, starts, ends)
    target = np.asarray(n, dtype=np.float64).reshape(-1, 1)
    xi, adam, loss = _regression_epoch(module.spec, module.xi, module.adam, x, target, minibatch_size, rng)
    return replace(module, xi=xi, adam=adam), loss


def iem_loss(module: UncertaintyModule, starts, ends, n) -> float:
    pred = predict_steps(module, starts, ends)
    return float(np.mean((np.asarray(n, dtype=np.float64) - pred) ** 2))


# -- tabular oracle ------------------------------------------------------------


class CountTable:
    """Visit counts over a uniform grid of the state box."""

    def __init__(self, low, high, bins: int = 10):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        if self.low.shape != self.high.shape or not np.all(self.high > self.low):
            raise ValueError("bounds must be matching vectors with high > low")
        self.bins = int(bins)
        self.counts: Counter[tuple[int, ...]] = Counter()

    def cell(self, s) -> tuple[int, ...]:
        frac = (np.asarray(s, dtype=np.float64) - self.low) / (self.high - self.low)
        idx = np.clip(np.floor(frac * self.bins).astype(int), 0, self.bins - 1)
        return tuple(int(i) for i in idx)

    def record(self, s) -> None:
        self.counts[self.cell(s)] += 1

    def record_many(self, states) -> None:
        for s in states:
            self.record(s)

    def __getitem__(self, s) -> int:
        return self.counts.get(self.cell(s), 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def count_bonus(table: CountTable, s) -> float:
    """``sqrt(1 / N(s))``; an unvisited cell gets the cap of 1."""
    visits = table[s]
    return 1.0 if visits == 0 else math.sqrt(1.0 / visits)

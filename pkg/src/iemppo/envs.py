"""Seedable continuous-control tasks small enough to train on a laptop CPU.

All three follow one contract: ``reset(rng)`` returns the first observation and
``step(action)`` returns a :class:`StepResult` that separates environmental
termination from the time limit.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import EpisodeDoneError, ShapeError


class StepResult(NamedTuple):
    next_state: np.ndarray
    reward: float
    terminated: bool
    truncated: bool


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    return -((math.pi - theta) % (2.0 * math.pi) - math.pi)


class Env:
    name = "env"
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    state_low: np.ndarray
    state_high: np.ndarray
    max_episode_steps: int

    def __init__(self):
        self._t = 0
        self._done = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._t = 0
        self._done = False
        self._reset(rng)
        return self.observe()

    def reset_to(self, *state: float) -> np.ndarray:
        """Start an episode from an explicit internal state (for tests and oracles)."""
        self._t = 0
        self._done = False
        self._set_state(*state)
        return self.observe()

    def step(self, action) -> StepResult:
        if self._done:
            raise EpisodeDoneError(f"{self.name}: episode is over, call reset() first")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape[0] != self.action_dim:
            raise ShapeError(f"{self.name}: expected action of length {self.action_dim}, got {action.shape[0]}")
        action = np.clip(action, self.action_low, self.action_high)
        reward, terminated = self._advance(action)
        self._t += 1
        truncated = not terminated and self._t >= self.max_episode_steps
        self._done = terminated or truncated
        return StepResult(self.observe(), reward, terminated, truncated)

    @property
    def elapsed_steps(self) -> int:
        return self._t

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def _reset(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _set_state(self, *state: float) -> None:
        raise NotImplementedError

    def _advance(self, action: np.ndarray) -> tuple[float, bool]:
        raise NotImplementedError


class Pendulum(Env):
    """Torque-limited swing-up.  Observation ``(cos th, sin th, thdot)``."""

    name = "pendulum"
    state_dim = 3
    action_dim = 1
    action_low = np.array([-2.0])
    action_high = np.array([2.0])
    state_low = np.array([-1.0, -1.0, -8.0])
    state_high = np.array([1.0, 1.0, 8.0])
    max_episode_steps = 200

    g = 10.0
    m = 1.0
    length = 1.0
    dt = 0.05
    max_speed = 8.0

    def _reset(self, rng):
        self.theta = wrap_angle(rng.uniform(-math.pi, math.pi))
        self.theta_dot = rng.uniform(-1.0, 1.0)

    def _set_state(self, theta, theta_dot=0.0):
        self.theta = float(theta)
        self.theta_dot = float(theta_dot)

    def observe(self):
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def _advance(self, action):
        u = float(action[0])
        th, thdot = self.theta, self.theta_dot
        cost = wrap_angle(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2
        accel = 3.0 * self.g / (2.0 * self.length) * math.sin(th) + 3.0 / (self.m * self.length**2) * u
        thdot = min(max(thdot + accel * self.dt, -self.max_speed), self.max_speed)
        self.theta = wrap_angle(th + thdot * self.dt)
        self.theta_dot = thdot
        return -cost, False


class MountainCarContinuous(Env):
    """Underpowered car in a valley; must rock back and forth to reach the flag."""

    name = "mountaincar"
    state_dim = 2
    action_dim = 1
    action_low = np.array([-1.0])
    action_high = np.array([1.0])
    state_low = np.array([-1.2, -0.07])
    state_high = np.array([0.6, 0.07])
    max_episode_steps = 999

    power = 0.0015
    gravity = 0.0025
    goal_position = 0.45
    goal_reward = 100.0

    def _reset(self, rng):
        self.position = rng.uniform(-0.6, -0.4)
        self.velocity = 0.0

    def _set_state(self, position, velocity=0.0):
        self.position = float(position)
        self.velocity = float(velocity)

    def observe(self):
        return np.array([self.position, self.velocity])

    def _advance(self, action):
        force = float(action[0])
        v = self.velocity + force * self.power - self.gravity * math.cos(3.0 * self.position)
        v = min(max(v, -0.07), 0.07)
        p = self.position + v
        p = min(max(p, -1.2), 0.6)
        if p == -1.2 and v < 0:
            v = 0.0
        self.position, self.velocity = p, v
        reward = -0.1 * force**2
        terminated = p >= self.goal_position
        if terminated:
            reward += self.goal_reward
        return reward, terminated


class PointTrap(Env):
    """2-D point mass with a reward bump (decoy) on the way to a distant goal.

    Sitting in the decoy beats the per-step reward of walking past it, so a
    short-sighted learner stalls there instead of collecting the goal bonus.
    """

    name = "pointtrap"
    state_dim = 4
    action_dim = 2
    action_low = np.array([-1.0, -1.0])
    action_high = np.array([1.0, 1.0])
    state_low = np.array([-3.0, -4.0, -1.0, -1.0])
    state_high = np.array([8.0, 4.0, 1.0, 1.0])
    max_episode_steps = 300

    dt = 0.1
    max_speed = 1.0
    goal = (5.0, 0.0)
    goal_radius = 0.5
    goal_reward = 500.0
    decoy = (1.5, 0.0)
    decoy_radius = 0.5
    decoy_reward = 2.0

    def _reset(self, rng):
        self.x = self.y = self.vx = self.vy = 0.0

    def _set_state(self, x, y, vx=0.0, vy=0.0):
        self.x, self.y, self.vx, self.vy = float(x), float(y), float(vx), float(vy)

    def observe(self):
        return np.array([self.x, self.y, self.vx, self.vy])

    def reward_at(self, x: float, y: float) -> tuple[float, bool]:
        reward = -math.hypot(x - self.goal[0], y - self.goal[1])
        if math.hypot(x - self.decoy[0], y - self.decoy[1]) <= self.decoy_radius:
            reward += self.decoy_reward
        reached = math.hypot(x - self.goal[0], y - self.goal[1]) <= self.goal_radius
        if reached:
            reward += self.goal_reward
        return reward, reached

    def _advance(self, action):
        ax, ay = float(action[0]), float(action[1])
        vx = min(max(self.vx + ax * self.dt, -self.max_speed), self.max_speed)
        vy = min(max(self.vy + ay * self.dt, -self.max_speed), self.max_speed)
        x = self.x + vx * self.dt
        y = self.y + vy * self.dt
        # inelastic walls
        lo, hi = self.state_low, self.state_high
        if not lo[0] <= x <= hi[0]:
            x = min(max(x, lo[0]), hi[0])
            vx = 0.0
        if not lo[1] <= y <= hi[1]:
            y = min(max(y, lo[1]), hi[1])
            vy = 0.0
        self.x, self.y, self.vx, self.vy = x, y, vx, vy
        return self.reward_at(x, y)


ENVS = {cls.name: cls for cls in (Pendulum, MountainCarContinuous, PointTrap)}


def make_env(name: str) -> Env:
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


def pendulum_env() -> Pendulum:
    return Pendulum()


def mountain_car_continuous_env() -> MountainCarContinuous:
    return MountainCarContinuous()


def point_trap_env() -> PointTrap:
    return PointTrap()

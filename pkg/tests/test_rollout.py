import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iemppo.envs import pendulum_env, point_trap_env
from iemppo.nn import MlpSpec, init_params
from iemppo.policy import GaussianPolicy
from iemppo.rollout import Trajectory, Transition, advantages, build_batch, collect, reward_to_go


def make_traj(rewards, terminated=True, intrinsic=None):
    intrinsic = intrinsic or [0.0] * len(rewards)
    n = len(rewards)
    return Trajectory([
        Transition(np.array([float(i)]), np.zeros(1), r, 0.0,
                   terminated and i == n - 1, (not terminated) and i == n - 1,
                   np.array([float(i + 1)]), intrinsic_reward=b)
        for i, (r, b) in enumerate(zip(rewards, intrinsic))
    ])


def zero_value(_):
    return 0.0


def test_hand_recursion_half_discount():
    np.testing.assert_allclose(reward_to_go(make_traj([1, 1, 1]), 0.5, zero_value), [1.75, 1.5, 1.0])


def test_bootstrap_on_truncation():
    out = reward_to_go(make_traj([1.0], terminated=False), 0.99, lambda s: 2.0)
    np.testing.assert_allclose(out, [2.98])


def test_terminated_ignores_value():
    out = reward_to_go(make_traj([0, 0, 1]), 0.99, lambda s: 1e6)
    np.testing.assert_allclose(out, [0.9801, 0.99, 1.0], rtol=1e-15)


def test_intrinsic_reward_enters_returns():
    out = reward_to_go(make_traj([1, 1], intrinsic=[0.5, 0.25]), 1.0, zero_value)
    np.testing.assert_allclose(out, [2.75, 1.25])


def test_bootstrap_uses_final_next_state():
    seen = []
    reward_to_go(make_traj([0, 0, 0], terminated=False), 0.9, lambda s: seen.append(s) or 0.0)
    np.testing.assert_array_equal(seen[0], [3.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.booleans(), st.floats(-10, 10))
def test_zero_discount_returns_rewards(rewards, terminated, tail):
    out = reward_to_go(make_traj(rewards, terminated), 0.0, lambda s: tail)
    np.testing.assert_array_equal(out, rewards)


def test_advantages_raw_and_normalized():
    np.testing.assert_array_equal(advantages([2, 3], [1, 1], normalize=False), [1, 2])
    np.testing.assert_allclose(advantages([2, 3], [1, 1], normalize=True), [-1, 1])


def test_constant_advantages_normalize_to_zero():
    np.testing.assert_array_equal(advantages([4, 4, 4], [1, 1, 1]), [0, 0, 0])


def test_advantages_errors():
    with pytest.raises(ValueError):
        advantages([], [])
    with pytest.raises(ValueError):
        advantages([1.0], [0.0], normalize=True)
    with pytest.raises(ValueError):
        advantages([1.0, 2.0], [0.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
def test_normalized_moments(values):
    returns = np.asarray(values)
    if np.ptp(returns) < 1e-3:
        return
    adv = advantages(returns, np.zeros_like(returns))
    assert abs(adv.mean()) < 1e-9
    assert abs(adv.std() - 1) < 1e-9


def test_per_episode_independence():
    trajs = [make_traj([1, 2, 3]), make_traj([5, -1], terminated=False), make_traj([0.5])]
    value = lambda s: np.full(len(s), 0.3)  # noqa: E731
    fwd = build_batch(trajs, 0.9, value, normalize=False)
    back = build_batch(trajs[::-1], 0.9, value, normalize=False)
    lens = [3, 2, 1]
    chunks = np.split(fwd.returns, np.cumsum(lens)[:-1])
    rchunks = np.split(back.returns, np.cumsum(lens[::-1])[:-1])[::-1]
    for a, b in zip(chunks, rchunks):
        np.testing.assert_array_equal(a, b)


# -- collection -----------------------------------------------------------------


@pytest.fixture
def pend_policy():
    env = pendulum_env()
    spec = MlpSpec(env.state_dim, (16,), env.action_dim)
    return GaussianPolicy(spec, init_params(spec, np.random.default_rng(0)), env.action_low, env.action_high)


def test_min_steps_one_runs_a_whole_episode(pend_policy):
    trajs = collect(pend_policy, 0.5, pendulum_env(), 1, np.random.default_rng(0))
    assert len(trajs) == 1 and len(trajs[0]) == 200
    assert trajs[0].truncated and not trajs[0].terminated


def test_collect_stops_after_enough_steps(pend_policy):
    trajs = collect(pend_policy, 0.5, pendulum_env(), 401, np.random.default_rng(0))
    assert [len(t) for t in trajs] == [200, 200, 200]


def test_no_hook_means_zero_intrinsic(pend_policy):
    trajs = collect(pend_policy, 0.5, pendulum_env(), 10, np.random.default_rng(0))
    assert all(t.intrinsic_reward == 0.0 for tr in trajs for t in tr.transitions)


def test_hook_called_per_transition(pend_policy):
    calls = []

    def hook(s, a, s2):
        calls.append((s, a, s2))
        return 0.25

    trajs = collect(pend_policy, 0.5, pendulum_env(), 10, np.random.default_rng(0), intrinsic=hook)
    assert len(calls) == 200
    assert all(t.intrinsic_reward == 0.25 for t in trajs[0].transitions)
    # hook sees the clamped action the environment received
    assert all(abs(a[0]) <= 2.0 for _, a, _ in calls)


def test_collect_is_deterministic(pend_policy):
    def go():
        trajs = collect(pend_policy, 0.5, pendulum_env(), 300, np.random.default_rng(5),
                        env_rng=np.random.default_rng(6))
        return np.vstack([t.states() for t in trajs]), np.vstack([t.actions() for t in trajs])

    (s1, a1), (s2, a2) = go(), go()
    assert s1.tobytes() == s2.tobytes() and a1.tobytes() == a2.tobytes()


def test_only_final_transition_is_flagged():
    env = point_trap_env()
    spec = MlpSpec(env.state_dim, (8,), env.action_dim)
    policy = GaussianPolicy(spec, init_params(spec, np.random.default_rng(1)), env.action_low, env.action_high)
    for traj in collect(policy, 0.6, env, 600, np.random.default_rng(2)):
        flags = [t.terminated or t.truncated for t in traj.transitions]
        assert flags[-1] and not any(flags[:-1])
        assert np.isfinite([t.log_prob_old for t in traj.transitions]).all()


def test_build_batch_shapes_and_normalization(pend_policy):
    trajs = collect(pend_policy, 0.5, pendulum_env(), 400, np.random.default_rng(0))
    batch = build_batch(trajs, 0.99, lambda s: np.zeros(len(s)))
    assert batch.states.shape == (400, 3) and batch.actions.shape == (400, 1)
    assert len(batch.returns) == len(batch.advantages) == len(batch.log_probs_old) == 400
    assert abs(batch.advantages.mean()) < 1e-9 and abs(batch.advantages.std() - 1) < 1e-9


def test_state_sequence_includes_final_state():
    traj = make_traj([1, 2])
    np.testing.assert_array_equal(traj.state_sequence()[:, 0], [0, 1, 2])
    assert traj.episode_return == 3

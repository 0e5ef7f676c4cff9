import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iemppo.envs import pendulum_env
from iemppo.errors import ConfigError
from iemppo.harness import RunConfig, init_state
from iemppo.nn import AdamState, MlpSpec, ParamSet, adam_step, init_params, mlp_forward
from iemppo.policy import GaussianPolicy, log_prob
from iemppo.ppo import (
    PpoConfig,
    TrainingError,
    ValueFunction,
    clip_objective,
    policy_update,
    surrogate_grad,
    train_iteration,
    value_update,
)
from iemppo.rollout import Batch


def test_clip_examples():
    assert clip_objective(1.3, 1.0, 0.2) == pytest.approx(1.2)
    assert clip_objective(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    for a in (-2.0, 0.0, 0.7, 3.0):
        assert clip_objective(1.0, a, 0.2) == a


@settings(max_examples=200, deadline=None)
@given(r=st.floats(1e-3, 10), a=st.floats(-10, 10), eps=st.floats(0.01, 0.99))
def test_clip_never_exceeds_unclipped(r, a, eps):
    assert clip_objective(r, a, eps) <= r * a + 1e-12


@settings(max_examples=200, deadline=None)
@given(r1=st.floats(1e-3, 10), r2=st.floats(1e-3, 10), a=st.floats(0.01, 10), eps=st.floats(0.01, 0.99))
def test_clip_flat_outside_band(r1, r2, a, eps):
    if r1 > 1 + eps and r2 > 1 + eps:
        assert clip_objective(r1, a, eps) == clip_objective(r2, a, eps)
    if r1 < 1 - eps and r2 < 1 - eps:
        assert clip_objective(r1, -a, eps) == clip_objective(r2, -a, eps)


def test_clip_is_vectorized():
    out = clip_objective(np.array([0.5, 1.0, 1.5]), np.array([1.0, 1.0, -1.0]), 0.2)
    np.testing.assert_allclose(out, [0.5, 1.0, -1.5])


@pytest.mark.parametrize("kw", [
    dict(clip_epsilon=0.0), dict(clip_epsilon=1.5), dict(gamma=0.0), dict(gamma=1.1), dict(epochs=0),
    dict(policy_lr=-1.0), dict(kl_limit=0.0), dict(minibatch_size=0),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        PpoConfig(**kw)


def test_config_defaults():
    cfg = PpoConfig()
    assert (cfg.clip_epsilon, cfg.gamma, cfg.epochs, cfg.minibatch_size) == (0.2, 0.99, 80, 64)
    assert (cfg.policy_lr, cfg.value_lr, cfg.kl_limit) == (0.0003, 0.001, 0.015)


# -- policy update on synthetic batches ----------------------------------------


def synthetic(n=256, seed=0, sigma=0.5, adv_scale=1.0, hidden=(16,), coherent=False):
    """Batch sampled from the policy itself.

    ``coherent`` rewards every action that pushed the first dimension upwards,
    which gives the update a consistent direction to move the mean.
    """
    rng = np.random.default_rng(seed)
    spec = MlpSpec(3, hidden, 2)
    policy = GaussianPolicy(spec, init_params(spec, rng), [-5.0, -5.0], [5.0, 5.0])
    states = rng.normal(size=(n, 3))
    noise = rng.normal(size=(n, 2))
    actions = policy.mean(states) + sigma * noise
    logp = log_prob(policy.mean(states), sigma, actions)
    adv = adv_scale * (noise[:, 0] if coherent else rng.normal(size=n))
    return policy, Batch(states, actions, logp, np.zeros(n), adv)


def test_zero_advantages_leave_policy_unchanged():
    policy, batch = synthetic()
    batch.advantages[:] = 0.0
    cfg = PpoConfig(epochs=10)
    out = policy_update(policy, batch, 0.5, cfg, AdamState.create(policy.theta, cfg.policy_lr),
                        np.random.default_rng(0))
    assert out.policy.theta == policy.theta
    assert out.epochs_run == 10 and abs(out.final_kl) < 1e-12


def test_high_advantage_action_gains_probability():
    policy, batch = synthetic(n=64)
    batch.advantages[:] = 0.0
    batch.advantages[7] = 5.0
    cfg = PpoConfig(epochs=5)
    out = policy_update(policy, batch, 0.5, cfg, AdamState.create(policy.theta, cfg.policy_lr),
                        np.random.default_rng(0))
    before = log_prob(policy.mean(batch.states[7]), 0.5, batch.actions[7])
    after = log_prob(out.policy.mean(batch.states[7]), 0.5, batch.actions[7])
    assert after > before


def test_extreme_advantages_trigger_kl_stop():
    policy, batch = synthetic(adv_scale=100.0, coherent=True)
    cfg = PpoConfig()
    out = policy_update(policy, batch, 0.5, cfg, AdamState.create(policy.theta, cfg.policy_lr),
                        np.random.default_rng(0))
    assert out.epochs_run < 80 and out.final_kl > 0.015


def test_infinite_kl_limit_runs_all_epochs():
    policy, batch = synthetic(adv_scale=100.0, coherent=True)
    cfg = PpoConfig(kl_limit=math.inf)
    out = policy_update(policy, batch, 0.5, cfg, AdamState.create(policy.theta, cfg.policy_lr),
                        np.random.default_rng(0))
    assert out.epochs_run == 80


def surrogate(policy, theta_flat, batch, sigma):
    p = GaussianPolicy(policy.spec, ParamSet.from_flat(theta_flat, policy.theta.shapes),
                       policy.action_low, policy.action_high)
    ratio = np.exp(log_prob(p.mean(batch.states), sigma, batch.actions) - batch.log_probs_old)
    return float(np.mean(ratio * batch.advantages))


def test_unclipped_gradient_is_vanilla_policy_gradient():
    policy, batch = synthetic(n=12, hidden=(4,))
    # move away from the sampling policy so the ratio is not 1
    rng = np.random.default_rng(3)
    moved = ParamSet.from_flat(policy.theta.flat + 0.05 * rng.normal(size=policy.theta.size),
                               policy.theta.shapes)
    policy = GaussianPolicy(policy.spec, moved, policy.action_low, policy.action_high)
    grads, _, _ = surrogate_grad(policy, batch.states, batch.actions, batch.log_probs_old,
                                 batch.advantages, 0.5, math.inf)
    h = 1e-6
    flat = policy.theta.flat
    numeric = np.empty_like(flat)
    for k in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[k] += h
        down[k] -= h
        numeric[k] = (surrogate(policy, up, batch, 0.5) - surrogate(policy, down, batch, 0.5)) / (2 * h)
    np.testing.assert_allclose(grads.flat, numeric, rtol=1e-5, atol=1e-8)


def test_one_epoch_equals_one_vanilla_step():
    policy, batch = synthetic(n=12, hidden=(4,))
    cfg = PpoConfig(clip_epsilon=math.inf, kl_limit=math.inf, epochs=1, minibatch_size=12)
    adam = AdamState.create(policy.theta, cfg.policy_lr)
    out = policy_update(policy, batch, 0.5, cfg, adam, np.random.default_rng(0))
    # at the sampling policy the ratio is 1: gradient is mean(A * grad log pi)
    mu = policy.mean(batch.states)
    d_mu = batch.advantages[:, None] * (batch.actions - mu) / 0.25 / len(batch)
    from iemppo.nn import mlp_backward
    g, _ = mlp_backward(policy.spec, policy.theta, batch.states, d_mu)
    expected, _ = adam_step(policy.theta, ParamSet.from_flat(-g.flat, g.shapes),
                            AdamState.create(policy.theta, cfg.policy_lr))
    np.testing.assert_allclose(out.policy.theta.flat, expected.flat, rtol=0, atol=1e-14)


def test_clipped_gradient_matches_finite_differences():
    policy, batch = synthetic(n=16, hidden=(4,))
    rng = np.random.default_rng(4)
    moved = ParamSet.from_flat(policy.theta.flat + 0.3 * rng.normal(size=policy.theta.size),
                               policy.theta.shapes)
    policy = GaussianPolicy(policy.spec, moved, policy.action_low, policy.action_high)

    def objective(flat):
        p = GaussianPolicy(policy.spec, ParamSet.from_flat(flat, moved.shapes), policy.action_low, policy.action_high)
        ratio = np.exp(log_prob(p.mean(batch.states), 0.5, batch.actions) - batch.log_probs_old)
        return float(np.mean(clip_objective(ratio, batch.advantages, 0.2)))

    grads, obj, ratio = surrogate_grad(policy, batch.states, batch.actions, batch.log_probs_old,
                                       batch.advantages, 0.5, 0.2)
    assert obj == pytest.approx(objective(moved.flat))
    # skip draws where some ratio sits on a kink
    assert np.all(np.abs(np.abs(ratio - 1) - 0.2) > 1e-3)
    h = 1e-7
    numeric = np.array([
        (objective(moved.flat + h * e) - objective(moved.flat - h * e)) / (2 * h)
        for e in np.eye(moved.size)
    ])
    np.testing.assert_allclose(grads.flat, numeric, rtol=1e-5, atol=1e-8)


def test_nonfinite_objective_reports_location():
    policy, batch = synthetic(n=130)
    batch.advantages[100] = np.nan
    cfg = PpoConfig(epochs=3, kl_limit=math.inf)
    with pytest.raises(TrainingError, match=r"iteration 4, epoch 0, minibatch \d"):
        policy_update(policy, batch, 0.5, cfg, AdamState.create(policy.theta, 1e-3),
                      np.random.default_rng(0), iteration=4)


# -- value regression ---------------------------------------------------------------


def value_net(seed=0, hidden=(16,)):
    spec = MlpSpec(3, hidden, 1)
    return ValueFunction(spec, init_params(spec, np.random.default_rng(seed)))


def test_matched_targets_leave_value_unchanged():
    v = value_net()
    states = np.random.default_rng(1).normal(size=(1, 3))
    cfg = PpoConfig(epochs=5)
    out = value_update(v, states, v(states), cfg, AdamState.create(v.phi, cfg.value_lr),
                       np.random.default_rng(0))
    assert out.value.phi == v.phi
    assert out.loss_trace == [0.0] * 5


def test_value_overfits_one_sample():
    v = value_net()
    state = np.array([[0.3, -0.2, 0.9]])
    cfg = PpoConfig(epochs=600)
    out = value_update(v, state, [3.7], cfg, AdamState.create(v.phi, cfg.value_lr), np.random.default_rng(0))
    assert abs(out.value(state)[0] - 3.7) < 1e-2


def test_value_loss_decreases_on_fixed_batch():
    v = value_net(hidden=(32,))
    rng = np.random.default_rng(2)
    states = rng.normal(size=(256, 3))
    targets = np.sin(states[:, 0]) + 0.5 * states[:, 1] ** 2
    cfg = PpoConfig(epochs=60)
    trace = value_update(v, states, targets, cfg, AdamState.create(v.phi, cfg.value_lr), rng).loss_trace
    assert np.mean(trace[-10:]) < np.mean(trace[:10])
    assert np.polyfit(np.arange(len(trace)), trace, 1)[0] < 0


def test_value_rejects_length_mismatch():
    v = value_net()
    with pytest.raises(ValueError):
        value_update(v, np.zeros((3, 3)), np.zeros(2), PpoConfig(), AdamState.create(v.phi, 1e-3),
                     np.random.default_rng(0))


# -- full iteration -------------------------------------------------------------------


def small_config(**kw):
    base = dict(env="pendulum", algo="ppo", seed=3, total_env_steps=400, steps_per_iteration=200,
                epochs=4, hidden_dims=(16,), record_time=False)
    base.update(kw)
    return RunConfig(**base)


@pytest.mark.parametrize("algo", ["ppo", "icm-ppo", "iem-ppo"])
def test_iteration_is_deterministic(algo):
    def go():
        cfg = small_config(algo=algo)
        state, env = init_state(cfg)
        return [train_iteration(state, env, cfg.ppo_config(), 200, clock=lambda: 0.0).values()
                for _ in range(2)]

    assert go() == go()


def test_iteration_row_contents():
    cfg = small_config(algo="iem-ppo")
    state, env = init_state(cfg)
    row = train_iteration(state, env, cfg.ppo_config(), 200)
    assert row.iteration == 1 and row.env_steps == 200
    assert row.ret_min <= row.ret_mean <= row.ret_max
    assert row.loss_intrinsic > 0
    assert row.sigma == 0.6 and 1 <= row.epochs_run <= 4
    assert len(state.episodes) == 1
    # once regressed onto step counts >= 1 the predictor pays a positive bonus
    row = train_iteration(state, env, cfg.ppo_config(), 200)
    assert row.iteration == 2 and row.env_steps == 400 and row.bonus_mean > 0


def test_ppo_iteration_has_no_bonus():
    cfg = small_config()
    state, env = init_state(cfg)
    row = train_iteration(state, env, cfg.ppo_config(), 200)
    assert row.bonus_mean == 0.0 and row.loss_intrinsic == 0.0
    assert isinstance(env, type(pendulum_env()))


def test_value_network_regresses_returns():
    cfg = small_config()
    state, env = init_state(cfg)
    train_iteration(state, env, cfg.ppo_config(), 200)
    out = mlp_forward(state.value.spec, state.value.phi, np.zeros((1, 3)))
    assert np.isfinite(out).all()

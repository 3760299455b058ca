import numpy as np
import pytest
from hypothesis import given, strategies as st

from saac.envs import (ConstrainedPendulum, EnvConfig, EnvUsageError, HazardPoint2D,
                       RiskyChain, make_env)
from saac.numerics import ConfigurationError, make_rng


def test_hazard_reset_outside_hazard(rng):
    env = make_env("hazard_point")
    s = env.reset(rng)
    assert np.linalg.norm(s[:2]) < 0.1 and not env.in_hazard(s)
    assert s.shape == (4,)


def test_chain_reset(rng):
    env = make_env("risky_chain")
    assert RiskyChain.decode(env.reset(rng)) == 0


def test_pendulum_reset_deterministic():
    env = make_env("pendulum")
    assert np.array_equal(env.reset(make_rng(3)), env.reset(make_rng(3)))


def test_hazard_entry_terminates_with_cost(rng):
    env = make_env("hazard_point")
    env.reset(rng)
    env.state = np.array([0.45, 0.0, 1.0, 0.0])
    res = env.step(np.array([1.0, 0.0]), rng)
    assert res.constraint_cost == 1.0 and res.terminated and not res.truncated
    with pytest.raises(EnvUsageError):
        env.step(np.zeros(2), rng)


def test_hazard_constraint_predicate():
    env = make_env("hazard_point")
    inside = np.array([1.2, 0.1, 0.0, 0.0])
    outside = np.array([1.0, 0.5 + 1e-9, 0.0, 0.0])
    on_edge = np.array([1.0, 0.5, 0.0, 0.0])
    assert env.constraint_violated(None, None, inside) == 1
    assert env.constraint_violated(None, None, outside) == 0
    assert env.constraint_violated(None, None, on_edge) == 0


def test_speed_limit_modes():
    fast_outside = np.array([-1.0, -1.0, 0.9, 0.9])
    fast_inside = np.array([1.0, 0.0, 0.9, 0.9])
    any_env = make_env(EnvConfig(speed_limit=0.5))
    all_env = make_env(EnvConfig(speed_limit=0.5, constraint_mode="all"))
    assert any_env.constraint_violated(None, None, fast_outside) == 1
    assert all_env.constraint_violated(None, None, fast_outside) == 0
    assert all_env.constraint_violated(None, None, fast_inside) == 1


def test_pendulum_velocity_predicate():
    env = make_env(EnvConfig(name="pendulum", velocity_limit=4.0))
    at_limit = np.array([1.0, 0.0, 4.0])
    above = np.array([1.0, 0.0, -4.0001])
    below = np.array([1.0, 0.0, 1.0])
    assert env.constraint_violated(None, None, at_limit) == 0
    assert env.constraint_violated(None, None, above) == 1
    assert env.constraint_violated(None, None, below) == 0


def test_pendulum_slow_step_is_safe(rng):
    env = make_env("pendulum")
    env.reset(rng)
    res = env.step(np.array([0.0]), rng)
    assert res.constraint_cost == 0.0 and not res.terminated


def test_pendulum_violations_accumulate(rng):
    env = make_env(EnvConfig(name="pendulum", velocity_limit=0.5))
    env.reset(rng)
    total, steps = 0.0, 0
    while True:
        res = env.step(np.array([2.0]), rng)
        total += res.constraint_cost
        steps += 1
        assert not res.terminated
        if res.truncated:
            break
    assert steps == 200 and total > 1


def test_chain_slip_frequency():
    rng = make_rng(0)
    env = make_env(EnvConfig(name="risky_chain", slip_prob=0.2))
    slips = n = 0
    while n < 100_000:
        env.reset(rng)
        done = False
        while not done and n < 100_000:
            res = env.step(np.array([1.0]), rng)
            slips += res.info["slipped"]
            n += 1
            done = res.terminated or res.truncated
    assert abs(slips / n - 0.2) < 0.004


def test_chain_moves():
    assert RiskyChain.move(0, 0) == RiskyChain.error_state
    assert RiskyChain.move(4, 1) == RiskyChain.goal_state
    assert RiskyChain.move(2, 0) == 1
    assert RiskyChain.move(RiskyChain.goal_state, 0) == RiskyChain.goal_state


def test_chain_deterministic_goal(rng):
    env = make_env(EnvConfig(name="risky_chain", slip_prob=0.0))
    env.reset(rng)
    rewards = [env.step(np.array([0.5]), rng) for _ in range(5)]
    assert [r.reward for r in rewards] == [0, 0, 0, 0, 1.0]
    assert rewards[-1].terminated


def test_chain_truncates_at_horizon(rng):
    env = make_env(EnvConfig(name="risky_chain", slip_prob=0.0))
    env.reset(rng)
    env.step(np.array([1.0]), rng)
    for t in range(19):
        res = env.step(np.array([-1.0 if t % 2 == 0 else 1.0]), rng)
    assert res.truncated and not res.terminated


def test_out_of_bounds_action(rng):
    env = make_env("hazard_point")
    env.reset(rng)
    with pytest.raises(EnvUsageError):
        env.step(np.array([1.5, 0.0]), rng)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EnvConfig(gamma=1.5).validate()
    with pytest.raises(ConfigurationError):
        EnvConfig(name="walker").validate()
    with pytest.raises(ConfigurationError):
        EnvConfig(constraint_mode="some").validate()
    with pytest.raises(ConfigurationError):
        EnvConfig(horizon=-1).validate()


def _rollout(env, actions, seed):
    rng = make_rng(seed)
    out = [env.reset(rng)]
    for a in actions:
        res = env.step(a, rng)
        out.append((res.next_state, res.reward, res.constraint_cost))
        if res.terminated or res.truncated:
            break
    return out


@pytest.mark.parametrize("cls", [HazardPoint2D, ConstrainedPendulum, RiskyChain])
def test_seeded_trajectories_identical(cls):
    env = cls()
    actions = make_rng(9).uniform(-env.action_bound, env.action_bound,
                                  (30, env.action_dim))
    a, b = _rollout(env, actions, 4), _rollout(env, actions, 4)
    assert np.array_equal(a[0], b[0])
    for x, y in zip(a[1:], b[1:]):
        assert np.array_equal(x[0], y[0]) and x[1:] == y[1:]


@given(st.integers(0, 2 ** 31))
def test_hazard_bounded_and_at_most_one_failure(seed):
    rng = make_rng(seed)
    env = make_env("hazard_point")
    lo, hi = env.reward_range
    s = env.reset(rng)
    failures = 0
    while True:
        res = env.step(rng.uniform(-1, 1, 2), rng)
        failures += res.constraint_cost
        assert np.all(np.abs(res.next_state[:2]) <= env.arena)
        assert np.all(np.abs(res.next_state[2:]) <= env.max_speed)
        assert lo <= res.reward <= hi
        assert res.constraint_cost in (0.0, 1.0)
        if res.terminated or res.truncated:
            break
    assert failures <= 1


@given(st.integers(0, 2 ** 31))
def test_pendulum_reward_bounded(seed):
    rng = make_rng(seed)
    env = make_env("pendulum")
    env.reset(rng)
    lo, hi = env.reward_range
    for _ in range(50):
        res = env.step(rng.uniform(-2, 2, 1), rng)
        assert lo <= res.reward <= hi
        assert abs(res.next_state[2]) <= env.max_speed


def test_goal_bonus(rng):
    env = make_env(EnvConfig(goal_bonus=5.0))
    env.reset(rng)
    env.state = np.array([2.0, 0.0, 0.0, 0.0])
    res = env.step(np.zeros(2), rng)
    assert res.reward == pytest.approx(1.0 + 5.0)

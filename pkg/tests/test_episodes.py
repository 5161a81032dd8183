import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultxfer.dynamics import make_system
from faultxfer.episodes import (
    bonus_reward,
    default_cost,
    episode_rewards,
    quadratic_reward,
    reward_for,
    rollout,
    run_episode,
)
from faultxfer.policies import LinearGain, ParametricPolicy, QuadraticCost, zero_policy


def test_quadratic_reward_examples():
    r = quadratic_reward(QuadraticCost.diagonal([1.0], [1e-5]))
    assert r(np.array([0.0]), np.array([0.0])) == 0.0
    assert r(np.array([2.0]), np.array([1.0])) == pytest.approx(-(4 + 1e-5))
    r = quadratic_reward(default_cost("cartpole"))
    assert r(np.array([0.1, 0.0, 1.0, 0.0]), np.array([0.0])) == pytest.approx(-(0.01 + 1e-5))


def test_setpoint_reward():
    r = quadratic_reward(QuadraticCost.diagonal([1.0], [1e-5], setpoint=[3.0]))
    assert r(np.array([3.0]), np.array([0.0])) == 0.0


def test_bonus_reward():
    r = bonus_reward(make_system("cartpole"))
    np.testing.assert_array_equal(r(np.array([[0.0, 0, 0, 0], [0.3, 0, 0, 0]]), np.zeros((2, 1))), [1.0, 0.0])
    with pytest.raises(ValueError):
        reward_for(make_system("cartpole"), "sparse")


def test_temperature_origin_zero_reward():
    spec = make_system("temperature")
    _, total = run_episode(spec, zero_policy(1), quadratic_reward(default_cost(spec)), 500, x0=[0.0])
    assert total == 0.0


@pytest.mark.parametrize("T", [1, 10, 500])
def test_temperature_geometric_series(T):
    spec = make_system("temperature")
    buf, total = run_episode(spec, zero_policy(1), quadratic_reward(default_cost(spec)), T, x0=[1.0])
    q = 0.999**2
    assert total == pytest.approx(-q * (1 - q**T) / (1 - q), rel=1e-12)
    assert len(buf) == T and buf.chained()


def test_cartpole_balancing_policy_reaches_cap():
    from faultxfer.dynamics import linearize
    from faultxfer.policies import lqr_gain

    spec = make_system("cartpole")
    pi = lqr_gain(linearize(spec), default_cost(spec))
    returns = episode_rewards(spec, pi, bonus_reward(spec), np.array([[0.05, 0, 0.02, 0], [-0.08, 0.03, 0, -0.04]]))
    np.testing.assert_array_equal(returns, [500.0, 500.0])


def test_cartpole_episode_stops_at_bounds():
    spec = make_system("cartpole")
    buf, total = run_episode(spec, zero_policy(4), bonus_reward(spec), 500, x0=[0.1, 0, 0, 0])
    assert 0 < total < 500 and len(buf) == total + 1  # the violating step earns nothing
    assert abs(buf.X_next[-1, 0]) > 0.2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_truncates_and_flags():
    spec = make_system("temperature", {"a": 1e3})
    buf, total = run_episode(spec, zero_policy(1), quadratic_reward(default_cost(spec)), 500, x0=[1.0])
    assert buf.diverged and len(buf) < 500 and not np.isnan(total)


def test_rollout_batch_matches_single_runs():
    spec = make_system("pendulum")
    pi = LinearGain([[3.0, 0.5]])
    reward = quadratic_reward(default_cost(spec))
    x0s = np.random.default_rng(0).uniform(-1, 1, (4, 2))
    batch = episode_rewards(spec, pi, reward, x0s, 200)
    single = [run_episode(spec, pi, reward, 200, x0=x)[1] for x in x0s]
    np.testing.assert_allclose(batch, single, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(-50, 50), st.floats(-2, 2))
def test_deployed_actions_stay_in_bounds(k, x0):
    spec = make_system("temperature")
    ro = rollout(spec, LinearGain([[k]]), quadratic_reward(default_cost(spec)), 50, np.array([[x0]]))
    assert np.all(np.abs(ro.actions) <= 1.0)


def test_training_rollout_is_seeded():
    spec = make_system("spring")
    pi = ParametricPolicy(2, 1, 4, rng=np.random.default_rng(0))
    reward = quadratic_reward(default_cost(spec))
    x0 = np.zeros((2, 2)) + 0.3
    a = rollout(spec, pi, reward, 30, x0, mode="training", rng=np.random.default_rng(9))
    b = rollout(spec, pi, reward, 30, x0, mode="training", rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a.raw_actions, b.raw_actions)
    np.testing.assert_array_equal(a.log_probs, b.log_probs)
    assert np.all(np.abs(a.actions) <= 1.0)

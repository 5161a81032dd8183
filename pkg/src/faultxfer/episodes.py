"""Episode execution and reward functions.

Rollouts are vectorized over a batch of independent episodes so that
evaluation and RL data collection stay cheap in pure numpy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import DEFAULT_HORIZON, SystemSpec, sample_initial_states, step, terminated
from .policies import QuadraticCost, gaussian_log_prob
from .sysid import TrajectoryBuffer

RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

# cost weights used for every benchmark (R is the small action weight)
ACTION_WEIGHT = 1e-5
STATE_WEIGHTS = {
    "temperature": (1.0,),
    "spring": (1.0, 1.0),
    "pendulum": (1.0, 1.0),
    "cartpole": (1.0, 0.1, 1e-5, 0.1),
}


def default_cost(spec_or_name) -> QuadraticCost:
    name = spec_or_name if isinstance(spec_or_name, str) else spec_or_name.name
    return QuadraticCost.diagonal(STATE_WEIGHTS[name], [ACTION_WEIGHT])


def quadratic_reward(cost: QuadraticCost) -> RewardFn:
    """``r(x, u) = -(x - x0)^T Q (x - x0) - u^T R u``."""

    def reward(x, u):
        return -cost(x, u)

    reward.kind = "quadratic"
    return reward


def bonus_reward(spec: SystemSpec) -> RewardFn:
    """+1 for every step that leaves the system inside its termination bounds."""

    def reward(x, u):
        return np.where(terminated(spec, x), 0.0, 1.0)

    reward.kind = "bonus"
    return reward


@dataclass
class Rollout:
    """Batch of episodes; arrays are time-major ``(T, k, ...)``.

    ``alive[t, i]`` says whether step ``t`` of episode ``i`` happened.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    alive: np.ndarray
    diverged: np.ndarray
    log_probs: Optional[np.ndarray] = None
    raw_actions: Optional[np.ndarray] = None

    @property
    def lengths(self) -> np.ndarray:
        return self.alive.sum(axis=0)

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=0)

    @property
    def n_steps(self) -> int:
        return int(self.alive.sum())


def rollout(
    spec: SystemSpec,
    policy,
    reward_fn: RewardFn,
    horizon: int,
    x0: np.ndarray,
    mode: str = "deployed",
    rng: Optional[np.random.Generator] = None,
) -> Rollout:
    """Run ``len(x0)`` episodes in lock-step.

    In ``deployed`` mode the policy's deterministic action is clipped; in
    ``training`` mode an action is sampled from the Gaussian head and the
    plant applies its clipped value.  Episodes end at the horizon, at a
    termination state, or when the state stops being finite.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x = np.array(x0, dtype=float).reshape(-1, spec.n)
    k = len(x)
    states = np.zeros((horizon + 1, k, spec.n))
    actions = np.zeros((horizon, k, spec.m))
    raw = np.zeros((horizon, k, spec.m)) if mode == "training" else None
    logp = np.zeros((horizon, k)) if mode == "training" else None
    rewards = np.zeros((horizon, k))
    alive = np.zeros((horizon, k), dtype=bool)
    diverged = np.zeros(k, dtype=bool)
    running = np.ones(k, dtype=bool)
    states[0] = x
    lo, hi = spec.lower, spec.upper
    for t in range(horizon):
        if mode == "training":
            mean = np.asarray(policy(x), dtype=float)
            log_std = policy.log_std
            sample = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
            raw[t] = sample
            logp[t] = gaussian_log_prob(sample, mean, log_std)
            u = np.clip(sample, lo, hi)
        else:
            u = np.clip(np.asarray(policy(x), dtype=float).reshape(k, spec.m), lo, hi)
        x_next = step(spec, x, u, check=False)
        finite = np.all(np.isfinite(x_next), axis=1)
        r = np.asarray(reward_fn(x_next, u), dtype=float)
        bad = running & ~(finite & np.isfinite(r))
        diverged |= bad
        live = running & ~bad
        alive[t] = live
        actions[t] = np.where(live[:, None], u, 0.0)
        rewards[t] = np.where(live, r, 0.0)
        x = np.where(live[:, None], x_next, x)
        states[t + 1] = x
        running = live & ~terminated(spec, x)
        if not running.any():
            return Rollout(states[: t + 2], actions[: t + 1], rewards[: t + 1], alive[: t + 1], diverged,
                           None if logp is None else logp[: t + 1], None if raw is None else raw[: t + 1])
    return Rollout(states, actions, rewards, alive, diverged, logp, raw)


def run_episode(spec: SystemSpec, policy, reward_fn: RewardFn, horizon: int = DEFAULT_HORIZON, x0=None, seed: int = 0):
    """Deploy ``policy`` for one episode; returns ``(buffer, episodic_reward)``.

    The buffer's ``diverged`` attribute flags a truncation caused by a
    non-finite state.
    """
    rng = np.random.default_rng(seed)
    if x0 is None:
        x0 = sample_initial_states(spec, rng, 1)[0]
    ro = rollout(spec, policy, reward_fn, horizon, np.asarray(x0, dtype=float).reshape(1, spec.n))
    T = int(ro.lengths[0])
    buf = TrajectoryBuffer(n=spec.n, m=spec.m, dt=spec.dt, cap=None)
    buf.add_episode(ro.states[: T + 1, 0], ro.actions[:T, 0], ro.rewards[:T, 0])
    buf.diverged = bool(ro.diverged[0])
    return buf, float(ro.returns[0])


def episode_rewards(spec: SystemSpec, policy, reward_fn: RewardFn, x0s, horizon: int = DEFAULT_HORIZON) -> np.ndarray:
    """Undiscounted return of the deployed policy from each initial state."""
    return rollout(spec, policy, reward_fn, horizon, x0s).returns


def reward_for(spec: SystemSpec, kind: str, cost: Optional[QuadraticCost] = None) -> RewardFn:
    if kind == "bonus":
        return bonus_reward(spec)
    if kind == "quadratic":
        return quadratic_reward(default_cost(spec) if cost is None else cost)
    raise ValueError(f"unknown reward kind {kind!r}")


__all__ = [
    "Rollout",
    "bonus_reward",
    "default_cost",
    "episode_rewards",
    "quadratic_reward",
    "reward_for",
    "rollout",
    "run_episode",
]

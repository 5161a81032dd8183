"""Compact clipped-surrogate policy-gradient learner.

A stand-in for PPO at desk scale: no critic, reward-to-go returns with a
batch-mean baseline, normalized advantages, and the clipped likelihood-ratio
objective optimised with Adam over a few epochs of minibatches.  Gradients
of the one-hidden-layer tanh policy are written out by hand.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dynamics import DEFAULT_HORIZON, SystemSpec, sample_initial_states
from .episodes import rollout
from .policies import LOG_STD_FLOOR, ParametricPolicy, TransformedPolicy, gaussian_log_prob

log = logging.getLogger(__name__)

TRAINABLE_SETS = ("source_params_only", "source_plus_transform", "all")
_HALF_LOG_2PI_E = 0.5 * np.log(2 * np.pi * np.e)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    steps_per_iteration: int = 2000
    iterations: int = 50
    clip_ratio: float = 0.2
    learning_rate: float = 3e-4
    minibatch_size: int = 250
    epochs: int = 10
    entropy_coefficient: float = 0.0
    max_grad_norm: float = 0.5
    seed: int = 0
    trainable_set: str = "all"
    horizon: int = DEFAULT_HORIZON
    # deterministic evaluation track: episodes per curve point (0 disables) and start-state seed
    eval_episodes: int = 0
    eval_seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 < self.clip_ratio < 1:
            raise ValueError(f"clip_ratio must lie in (0, 1), got {self.clip_ratio}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.trainable_set not in TRAINABLE_SETS:
            raise ValueError(f"trainable_set must be one of {TRAINABLE_SETS}")
        for name in ("steps_per_iteration", "minibatch_size", "epochs", "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.eval_episodes < 0:
            raise ValueError("eval_episodes must be >= 0")


@dataclass
class LearningCurve:
    """Per-iteration training statistics.

    ``mean_episodic_reward`` averages the stochastic episodes of each batch.
    ``eval_mean``/``eval_std``, when recorded, describe the deployed
    (deterministic, clipped) policy from fixed start states.
    """

    environment_steps: list = field(default_factory=list)
    mean_episodic_reward: list = field(default_factory=list)
    reward_std: list = field(default_factory=list)
    policy_entropy: list = field(default_factory=list)
    eval_mean: list = field(default_factory=list)
    eval_std: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.mean_episodic_reward)

    def append(self, steps, mean, std, entropy, eval_mean=None, eval_std=None) -> None:
        if self.environment_steps and steps <= self.environment_steps[-1]:
            raise ValueError("environment_steps must increase strictly")
        self.environment_steps.append(int(steps))
        self.mean_episodic_reward.append(float(mean))
        self.reward_std.append(float(std))
        self.policy_entropy.append(float(entropy))
        if eval_mean is not None:
            self.eval_mean.append(float(eval_mean))
            self.eval_std.append(float(eval_std))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    X: np.ndarray
    U: np.ndarray
    logp_old: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray

    def __len__(self) -> int:
        return len(self.X)

    def subset(self, idx) -> "Batch":
        return Batch(self.X[idx], self.U[idx], self.logp_old[idx], self.returns[idx], self.advantages[idx])


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def ascend(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --------------------------------------------------------------------------
# parameter plumbing


def _base(policy) -> ParametricPolicy:
    if isinstance(policy, ParametricPolicy):
        return policy
    if isinstance(policy, TransformedPolicy) and isinstance(policy.source, ParametricPolicy):
        return policy.source
    raise TypeError(f"{type(policy).__name__} is not trainable; need a parametric or transformed parametric policy")


def _includes_transform(policy, trainable_set: str) -> bool:
    if not isinstance(policy, TransformedPolicy):
        if trainable_set == "source_plus_transform":
            raise ValueError("source_plus_transform needs a transformed policy")
        return False
    return trainable_set in ("source_plus_transform", "all")


def get_params(policy, trainable_set: str = "all") -> np.ndarray:
    theta = _base(policy).theta
    if _includes_transform(policy, trainable_set):
        return np.concatenate([theta, policy.M.ravel(), policy.K_add.ravel()])
    return theta.copy()


def set_params(policy, params: np.ndarray, trainable_set: str = "all") -> None:
    base = _base(policy)
    k = base.size
    base.theta = np.array(params[:k], dtype=float)
    if _includes_transform(policy, trainable_set):
        mm = policy.M.size
        policy.M = np.array(params[k : k + mm]).reshape(policy.M.shape)
        policy.K_add = np.array(params[k + mm :]).reshape(policy.K_add.shape)


def log_prob(policy, X, U) -> np.ndarray:
    return gaussian_log_prob(U, np.asarray(policy(X)), policy.log_std)


def entropy(policy) -> float:
    return float(np.sum(policy.log_std + _HALF_LOG_2PI_E))


def _weighted_logp_grad(policy, trainable_set, X, U, weights, log_std_weight):
    """Gradient of ``sum_i w_i log pi(U_i | X_i) + log_std_weight * sum(log_std)``."""
    base = _base(policy)
    W1, b1, W2, b2, log_std = base.unpack()
    hid = np.tanh(X @ W1.T + b1)
    mu_s = hid @ W2.T + b2
    transformed = isinstance(policy, TransformedPolicy)
    mu = mu_s @ policy.M.T + X @ policy.K_add.T if transformed else mu_s
    inv_var = np.exp(-2 * log_std)
    diff = U - mu
    g_mu = weights[:, None] * diff * inv_var
    g_log_std = np.sum(weights[:, None] * (diff**2 * inv_var - 1.0), axis=0) + log_std_weight
    g_mu_s = g_mu @ policy.M if transformed else g_mu
    g_W2 = g_mu_s.T @ hid
    g_b2 = g_mu_s.sum(axis=0)
    g_pre = (g_mu_s @ W2) * (1 - hid**2)
    g_W1 = g_pre.T @ X
    g_b1 = g_pre.sum(axis=0)
    parts = [g_W1.ravel(), g_b1, g_W2.ravel(), g_b2, g_log_std]
    if _includes_transform(policy, trainable_set):
        parts += [(g_mu.T @ mu_s).ravel(), (g_mu.T @ X).ravel()]
    return np.concatenate(parts)


def surrogate(policy, batch: Batch, cfg: TrainConfig, trainable_set: Optional[str] = None):
    """Clipped surrogate objective and its gradient w.r.t. the trainable parameters.

    ``L = mean(min(r A, clip(r, 1-eps, 1+eps) A)) + c_ent * H``, where ``r``
    is the likelihood ratio against ``batch.logp_old``.
    """
    trainable_set = cfg.trainable_set if trainable_set is None else trainable_set
    logp = log_prob(policy, batch.X, batch.U)
    ratio = np.exp(logp - batch.logp_old)
    adv = batch.advantages
    eps = cfg.clip_ratio
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * adv
    value = float(np.mean(np.minimum(unclipped, clipped)) + cfg.entropy_coefficient * entropy(policy))
    # gradient flows only where the unclipped branch is the active minimum
    active = unclipped <= clipped
    weights = np.where(active, ratio * adv, 0.0) / len(batch)
    grad = _weighted_logp_grad(policy, trainable_set, batch.X, batch.U, weights, cfg.entropy_coefficient)
    return value, grad


def surrogate_update(policy, batch: Batch, cfg: TrainConfig, optimizer: Optional[Adam] = None, trainable_set=None):
    """One gradient-ascent step on the clipped surrogate; returns the new parameters.

    The policy is updated in place.  Without an ``optimizer`` the step is
    plain gradient ascent with ``cfg.learning_rate``.
    """
    trainable_set = cfg.trainable_set if trainable_set is None else trainable_set
    params = get_params(policy, trainable_set)
    _, grad = surrogate(policy, batch, cfg, trainable_set)
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite surrogate gradient")
    norm = np.linalg.norm(grad)
    if cfg.max_grad_norm and norm > cfg.max_grad_norm:
        grad = grad * (cfg.max_grad_norm / norm)
    if optimizer is None:
        new = params + cfg.learning_rate * grad
    else:
        new = optimizer.ascend(params, grad)
    base = _base(policy)
    k = base.size
    log_std = new[k - base.m : k]
    new[k - base.m : k] = np.maximum(log_std, LOG_STD_FLOOR)
    set_params(policy, new, trainable_set)
    return new


# --------------------------------------------------------------------------
# data collection and training


def discounted_returns(rewards: np.ndarray, alive: np.ndarray, gamma: float) -> np.ndarray:
    """Reward-to-go per step for time-major ``(T, k)`` arrays."""
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1])
    for t in range(len(rewards) - 1, -1, -1):
        acc = np.where(alive[t], rewards[t] + gamma * acc, 0.0)
        out[t] = acc
    return out


def collect(policy, spec: SystemSpec, reward_fn, cfg: TrainConfig, rng: np.random.Generator):
    """Run whole episodes in training mode until ``steps_per_iteration`` steps are gathered."""
    n_envs = max(1, int(np.ceil(cfg.steps_per_iteration / cfg.horizon)))
    X, U, LP, G, ep_returns = [], [], [], [], []
    steps = 0
    while steps < cfg.steps_per_iteration:
        x0 = sample_initial_states(spec, rng, n_envs)
        ro = rollout(spec, policy, reward_fn, cfg.horizon, x0, mode="training", rng=rng)
        mask = ro.alive
        ret = discounted_returns(ro.rewards, mask, cfg.gamma)
        X.append(ro.states[:-1][mask])
        U.append(ro.raw_actions[mask])
        LP.append(ro.log_probs[mask])
        G.append(ret[mask])
        ep_returns.append(ro.returns)
        steps += int(mask.sum())
    returns = np.concatenate(G)
    adv = returns - returns.mean()
    adv = adv / (adv.std() + 1e-8)
    batch = Batch(np.concatenate(X), np.concatenate(U), np.concatenate(LP), returns, adv)
    return batch, np.concatenate(ep_returns)


def train(policy, spec: SystemSpec, reward_fn, cfg: TrainConfig, curve: Optional[LearningCurve] = None,
          step_offset: int = 0, callback=None):
    """Fine-tune ``policy`` in place with the clipped-surrogate learner.

    With ``trainable_set='source_params_only'`` a transformed policy keeps
    its ``(M, K_add)`` frozen; ``source_plus_transform`` (or ``all``) trains
    them too.  Each curve point describes the policy that generated that
    iteration's batch.  ``callback(iteration, policy, curve)`` runs after
    every update.  Returns ``(policy, curve)``.
    """
    _base(policy)
    _includes_transform(policy, cfg.trainable_set)
    if policy.n != spec.n or policy.m != spec.m:
        raise ValueError(f"policy is {policy.n}->{policy.m}, system is {spec.n}->{spec.m}")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate)
    curve = LearningCurve() if curve is None else curve
    steps = step_offset
    eval_x0 = None
    if cfg.eval_episodes:
        eval_x0 = sample_initial_states(spec, np.random.default_rng(cfg.eval_seed), cfg.eval_episodes)
    for it in range(cfg.iterations):
        ev = None
        if eval_x0 is not None:
            ev = rollout(spec, policy, reward_fn, cfg.horizon, eval_x0).returns
        batch, ep_returns = collect(policy, spec, reward_fn, cfg, rng)
        steps += len(batch)
        curve.append(steps, ep_returns.mean(), ep_returns.std(), entropy(policy),
                     None if ev is None else ev.mean(), None if ev is None else ev.std())
        for _ in range(cfg.epochs):
            perm = rng.permutation(len(batch))
            for start in range(0, len(batch), cfg.minibatch_size):
                surrogate_update(policy, batch.subset(perm[start : start + cfg.minibatch_size]), cfg, opt)
        if not np.all(np.isfinite(get_params(policy, cfg.trainable_set))):
            raise TrainingError(f"parameters became non-finite at iteration {it}")
        log.debug("iter %d steps %d reward %.3f", it, steps, curve.mean_episodic_reward[-1])
        if callback is not None:
            callback(it, policy, curve)
    return policy, curve


def evaluate_policy(policy, spec: SystemSpec, reward_fn, n_episodes: int = 20, seed: int = 0,
                    horizon: int = DEFAULT_HORIZON, x0=None):
    """Mean and std of the undiscounted return of the deployed (clipped, deterministic) policy."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if x0 is None:
        starts = sample_initial_states(spec, np.random.default_rng(seed), n_episodes)
    else:
        starts = np.tile(np.asarray(x0, dtype=float).reshape(1, spec.n), (n_episodes, 1))
    returns = rollout(spec, policy, reward_fn, horizon, starts).returns
    return float(returns.mean()), float(returns.std())

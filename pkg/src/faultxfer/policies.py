"""Control policies: linear gains, LQR/MPC synthesis, the parametric
Gaussian policy used by the RL fine-tuner, and the fault-compensating
transformation of an arbitrary source policy.

Every policy is a callable ``policy(x) -> u`` returning the *raw*
(unclipped) action for a state of shape ``(n,)`` or a batch ``(k, n)``.
Clipping to the actuator range happens in :func:`act`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import LinearDynamics

LOG_STD_FLOOR = float(np.log(1e-3))
RANK_RTOL = 1e-8


class NotStabilizableError(ArithmeticError):
    """The Riccati iteration diverged or produced an unstable closed loop."""


class NoInputAuthorityError(ValueError):
    """``F_B @ B_s`` vanishes, so no action can influence the target plant."""


@dataclass(frozen=True)
class QuadraticCost:
    """Per-step cost ``(x - x0)^T Q (x - x0) + u^T R u`` with diagonal weights."""

    Q: np.ndarray
    R: np.ndarray
    setpoint: Optional[np.ndarray] = None

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        Q = np.diag(Q) if Q.ndim == 1 else np.atleast_2d(Q)
        R = np.diag(R) if R.ndim == 1 else np.atleast_2d(R)
        if np.any(Q != np.diag(np.diag(Q))) or np.any(R != np.diag(np.diag(R))):
            raise ValueError("Q and R must be diagonal")
        if np.any(np.diag(Q) < 0):
            raise ValueError("Q entries must be >= 0")
        if np.any(np.diag(R) <= 0):
            raise ValueError("R entries must be > 0")
        x0 = np.zeros(Q.shape[0]) if self.setpoint is None else np.asarray(self.setpoint, dtype=float).reshape(Q.shape[0])
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "setpoint", x0)

    @classmethod
    def diagonal(cls, q, r, setpoint=None) -> "QuadraticCost":
        return cls(np.diag(np.atleast_1d(np.asarray(q, float))), np.diag(np.atleast_1d(np.asarray(r, float))), setpoint)

    def __call__(self, x, u) -> np.ndarray:
        e = np.asarray(x, dtype=float) - self.setpoint
        u = np.asarray(u, dtype=float)
        return np.einsum("...i,ij,...j->...", e, self.Q, e) + np.einsum("...i,ij,...j->...", u, self.R, u)


# --------------------------------------------------------------------------
# policy variants


@dataclass
class LinearGain:
    """``u = -K (x - setpoint)``."""

    K: np.ndarray
    setpoint: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        if self.setpoint is not None:
            self.setpoint = np.asarray(self.setpoint, dtype=float).reshape(self.K.shape[1])

    @property
    def n(self) -> int:
        return self.K.shape[1]

    @property
    def m(self) -> int:
        return self.K.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.setpoint is not None:
            x = x - self.setpoint
        return -(x @ self.K.T)


@dataclass
class MPCPolicy:
    """Unconstrained receding-horizon controller on a linear model.

    For an LTI model without constraints the first action of the horizon
    problem is a fixed linear feedback, so the gain is computed once.
    """

    dynamics: LinearDynamics
    cost: QuadraticCost
    horizon: int = 5

    def __post_init__(self):
        self.K = mpc_gain(self.dynamics, self.cost, self.horizon)

    @property
    def n(self) -> int:
        return self.dynamics.n

    @property
    def m(self) -> int:
        return self.dynamics.m

    def __call__(self, x):
        return -((np.asarray(x, dtype=float) - self.cost.setpoint) @ self.K.T)


class ParametricPolicy:
    """One-hidden-layer tanh network with a Gaussian action head.

    All parameters live in one flat vector ``theta`` laid out as
    ``W1 (h, n), b1 (h), W2 (m, h), b2 (m), log_std (m)``.
    """

    def __init__(self, n: int, m: int, hidden: int = 32, theta=None, rng=None, init_log_std: float = 0.0):
        self.n, self.m, self.hidden = int(n), int(m), int(hidden)
        if theta is None:
            rng = np.random.default_rng(0) if rng is None else rng
            W1 = rng.standard_normal((hidden, n)) / np.sqrt(n)
            W2 = 0.01 * rng.standard_normal((m, hidden)) / np.sqrt(hidden)
            theta = np.concatenate([W1.ravel(), np.zeros(hidden), W2.ravel(), np.zeros(m), np.full(m, init_log_std)])
        theta = np.array(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {theta.shape}")
        self.theta = theta

    @property
    def size(self) -> int:
        h, n, m = self.hidden, self.n, self.m
        return h * n + h + m * h + m + m

    def unpack(self, theta=None):
        t = self.theta if theta is None else theta
        h, n, m = self.hidden, self.n, self.m
        i = 0
        W1 = t[i : i + h * n].reshape(h, n)
        i += h * n
        b1 = t[i : i + h]
        i += h
        W2 = t[i : i + m * h].reshape(m, h)
        i += m * h
        b2 = t[i : i + m]
        i += m
        return W1, b1, W2, b2, t[i : i + m]

    @property
    def log_std(self) -> np.ndarray:
        return self.unpack()[4]

    def hidden_layer(self, x):
        W1, b1, *_ = self.unpack()
        return np.tanh(np.asarray(x, dtype=float) @ W1.T + b1)

    def __call__(self, x):
        _, _, W2, b2, _ = self.unpack()
        return self.hidden_layer(x) @ W2.T + b2

    def copy(self) -> "ParametricPolicy":
        return ParametricPolicy(self.n, self.m, self.hidden, theta=self.theta.copy())


@dataclass
class TransformedPolicy:
    """Composite ``u_t(x) = M @ source(x) + K_add @ x``.

    ``rho`` is the pseudo-inverse matching residual
    ``||(F_B B_s) pinv(F_B B_s) - I||_F``; ``drift_mismatch`` is the part of
    the drift change that lies outside the input range and therefore cannot
    be compensated (zero means the target closed loop reproduces the source
    closed loop exactly).
    """

    source: object
    M: np.ndarray
    K_add: np.ndarray
    rho: float = 0.0
    drift_mismatch: float = 0.0

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        self.K_add = np.atleast_2d(np.asarray(self.K_add, dtype=float))

    @property
    def n(self) -> int:
        return self.K_add.shape[1]

    @property
    def m(self) -> int:
        return self.M.shape[0]

    @property
    def log_std(self) -> np.ndarray:
        return self.source.log_std

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.source(x) @ self.M.T + x @ self.K_add.T

    def copy(self) -> "TransformedPolicy":
        src = self.source.copy() if hasattr(self.source, "copy") else self.source
        return TransformedPolicy(src, self.M.copy(), self.K_add.copy(), self.rho, self.drift_mismatch)


def zero_policy(n: int, m: int = 1) -> LinearGain:
    return LinearGain(np.zeros((m, n)))


def is_stochastic(policy) -> bool:
    if isinstance(policy, TransformedPolicy):
        return is_stochastic(policy.source)
    return isinstance(policy, ParametricPolicy)


# --------------------------------------------------------------------------
# synthesis


def riccati_residual(dyn: LinearDynamics, cost: QuadraticCost, P: np.ndarray) -> float:
    A, B, Q, R = dyn.A_d, dyn.B_d, cost.Q, cost.R
    BtPA = B.T @ P @ A
    rhs = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
    return float(np.linalg.norm(P - rhs))


def lqr_gain(dyn: LinearDynamics, cost: QuadraticCost, tol: float = 1e-10, max_iter: int = 10**6) -> LinearGain:
    """Infinite-horizon LQR for the Euler-discretized pair ``(I + dt A, dt B)``.

    The discrete algebraic Riccati equation is solved by fixed-point value
    iteration.  The iteration contracts linearly, so the distance to the
    fixed point is estimated as ``delta / (1 - rate)`` and iteration stops
    once that estimate is below ``tol`` relative to ``||P||``.  With
    ``Q = 0`` the zero gain is returned without a stability check.
    """
    A, B, Q, R = dyn.A_d, dyn.B_d, cost.Q, cost.R
    if Q.shape != A.shape or R.shape != (dyn.m, dyn.m):
        raise ValueError("cost weights do not match the model dimensions")
    if not np.any(Q):
        # nothing to regulate: the zero gain is optimal even if the plant is unstable
        return LinearGain(np.zeros((dyn.m, dyn.n)), P=np.zeros_like(Q))
    At = A.T
    P = Q.copy()
    prev_delta = np.inf
    for _ in range(max_iter):
        BtPA = B.T @ P @ A
        P_next = Q + At @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
        P_next = 0.5 * (P_next + P_next.T)
        scale = np.linalg.norm(P_next)
        if not np.isfinite(scale) or scale > 1e15:
            raise NotStabilizableError("Riccati iteration diverged; (A, B) is not stabilizable")
        delta = np.linalg.norm(P_next - P)
        P = P_next
        rate = min(delta / prev_delta, 0.999999) if prev_delta > 0 else 0.0
        prev_delta = delta
        if delta / (1.0 - rate) <= tol * max(scale, 1e-300):
            break
    else:
        raise NotStabilizableError(f"Riccati iteration did not converge in {max_iter} iterations")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if np.max(np.abs(np.linalg.eigvals(A - B @ K))) >= 1.0:
        raise NotStabilizableError("LQR closed loop is not stable; (A, B) is not stabilizable")
    return LinearGain(K, setpoint=cost.setpoint if np.any(cost.setpoint) else None, P=P)


def mpc_gain(dyn: LinearDynamics, cost: QuadraticCost, horizon: int) -> np.ndarray:
    """Feedback gain of the first action of the H-step unconstrained LQ problem.

    Minimises ``sum_{j=1..H} x_j^T Q x_j + u_j^T R u_j`` subject to the Euler
    dynamics by a backward Riccati recursion with terminal weight Q.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    A, B, Q, R = dyn.A_d, dyn.B_d, cost.Q, cost.R
    S = Q.copy()  # cost-to-go weight on x_H
    K = None
    for j in range(horizon, 0, -1):
        BtSA = B.T @ S @ A
        K = np.linalg.solve(R + B.T @ S @ B, BtSA)
        if j > 1:
            S = Q + A.T @ S @ A - BtSA.T @ K
            S = 0.5 * (S + S.T)
    if not np.all(np.isfinite(K)):
        raise NotStabilizableError("finite-horizon Riccati recursion produced non-finite gains")
    return K


def mpc_action(dyn: LinearDynamics, cost: QuadraticCost, horizon: int, x) -> np.ndarray:
    """Unclipped first action of the receding-horizon problem from state ``x``."""
    K = mpc_gain(dyn, cost, horizon)
    return -((np.asarray(x, dtype=float) - cost.setpoint) @ K.T)


def transform_policy(pi_s, A_s, B_s, F_A, F_B) -> TransformedPolicy:
    """Compensate a known fault by rewriting the source policy.

    Choosing ``u_t`` so that ``F_A A_s x + F_B B_s u_t = A_s x + B_s u_s`` in
    the least-squares sense gives

        u_t = pinv(F_B B_s) B_s u_s + pinv(F_B B_s) (I - F_A) A_s x.
    """
    A_s = np.atleast_2d(np.asarray(A_s, dtype=float))
    B_s = np.asarray(B_s, dtype=float).reshape(A_s.shape[0], -1)
    F_A = np.atleast_2d(np.asarray(F_A, dtype=float))
    F_B = np.atleast_2d(np.asarray(F_B, dtype=float))
    n = A_s.shape[0]
    if F_A.shape != (n, n) or F_B.shape != (n, n):
        raise ValueError(f"fault matrices must be {n}x{n}")
    G = F_B @ B_s
    if not np.any(G):
        raise NoInputAuthorityError("F_B @ B_s is identically zero; the target plant ignores every action")
    G_pinv = np.linalg.pinv(G, rcond=RANK_RTOL)
    M = G_pinv @ B_s
    drift = (np.eye(n) - F_A) @ A_s
    K_add = G_pinv @ drift
    proj = G @ G_pinv
    rho = float(np.linalg.norm(proj - np.eye(n)))
    mismatch = float(np.linalg.norm((np.eye(n) - proj) @ drift) + np.linalg.norm((np.eye(n) - proj) @ B_s))
    return TransformedPolicy(pi_s, M, K_add, rho=rho, drift_mismatch=mismatch)


# --------------------------------------------------------------------------
# evaluation


def gaussian_log_prob(u, mean, log_std) -> np.ndarray:
    z = (np.asarray(u) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z**2, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * np.log(2 * np.pi)


def act(policy, x, mode: str = "deployed", bounds=(-1.0, 1.0), rng: Optional[np.random.Generator] = None):
    """Evaluate a policy.

    ``deployed`` returns the deterministic action clipped to ``bounds``.
    ``training`` samples from the Gaussian head of a parametric (or
    transformed parametric) policy and returns ``(action, log_prob)``; the
    sample is not clipped, the plant does that.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state is not finite")
    mean = np.asarray(policy(x), dtype=float)
    if not np.all(np.isfinite(mean)):
        raise ValueError("policy output is not finite")
    if mode == "deployed":
        lo, hi = bounds
        return np.clip(mean, lo, hi)
    if mode != "training":
        raise ValueError(f"unknown mode {mode!r}")
    if not is_stochastic(policy):
        raise TypeError(f"{type(policy).__name__} has no stochastic head")
    rng = np.random.default_rng() if rng is None else rng
    log_std = policy.log_std
    u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return u, gaussian_log_prob(u, mean, log_std)


# --------------------------------------------------------------------------
# serialization


def policy_to_dict(policy) -> dict:
    if isinstance(policy, LinearGain):
        d = {"variant": "linear_gain", "K": policy.K.tolist()}
        if policy.setpoint is not None:
            d["setpoint"] = policy.setpoint.tolist()
        return d
    if isinstance(policy, MPCPolicy):
        return {
            "variant": "mpc",
            "dynamics": policy.dynamics.to_dict(),
            "Q": np.diag(policy.cost.Q).tolist(),
            "R": np.diag(policy.cost.R).tolist(),
            "setpoint": policy.cost.setpoint.tolist(),
            "horizon": policy.horizon,
        }
    if isinstance(policy, ParametricPolicy):
        return {"variant": "parametric", "n": policy.n, "m": policy.m, "hidden": policy.hidden, "theta": policy.theta.tolist()}
    if isinstance(policy, TransformedPolicy):
        return {
            "variant": "transformed",
            "source": policy_to_dict(policy.source),
            "M": policy.M.tolist(),
            "K_add": policy.K_add.tolist(),
            "rho": policy.rho,
            "drift_mismatch": policy.drift_mismatch,
        }
    raise TypeError(f"cannot serialize {type(policy).__name__}")


def policy_from_dict(d: dict):
    variant = d.get("variant")
    if variant == "linear_gain":
        return LinearGain(np.array(d["K"], dtype=float), setpoint=d.get("setpoint"))
    if variant == "mpc":
        cost = QuadraticCost.diagonal(d["Q"], d["R"], d.get("setpoint"))
        return MPCPolicy(LinearDynamics.from_dict(d["dynamics"]), cost, int(d["horizon"]))
    if variant == "parametric":
        return ParametricPolicy(d["n"], d["m"], d["hidden"], theta=np.array(d["theta"], dtype=float))
    if variant == "transformed":
        return TransformedPolicy(
            policy_from_dict(d["source"]),
            np.array(d["M"], dtype=float),
            np.array(d["K_add"], dtype=float),
            d.get("rho", 0.0),
            d.get("drift_mismatch", 0.0),
        )
    raise ValueError(f"unknown policy variant {variant!r}")


def save_policy(policy, path) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(policy), indent=1, sort_keys=True) + "\n")


def load_policy(path):
    return policy_from_dict(json.loads(Path(path).read_text()))

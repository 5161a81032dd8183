"""Benchmark plants, parametric faults and linearization.

Every system is written in factored form

    xdot = F_A @ f_A(x) + F_B @ (g_B(x) @ u)

where ``f_A`` is the drift term and ``g_B`` the input map.  The nominal plant
has ``F_A = F_B = I``.  All functions accept a single state of shape ``(n,)``
or a batch of shape ``(k, n)``; the batch form is what the rollout code uses.
"""

from __future__ import annotations

import dataclasses
import types
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

SYSTEMS = ("temperature", "spring", "pendulum", "cartpole")

DEFAULT_PARAMS = {
    "temperature": {"a": -0.1, "b": 1.0},
    "spring": {"m": 1.0, "k": 10.0, "k_f": 0.2},
    "pendulum": {"m": 0.1, "l": 1.0, "g": 10.0, "k_f": 0.02},
    "cartpole": {"m_c": 0.5, "m_p": 0.1, "l": 1.0, "g": 10.0, "k_f": 0.01},
}

# (state dim, action dim)
DIMENSIONS = {"temperature": (1, 1), "spring": (2, 1), "pendulum": (2, 1), "cartpole": (4, 1)}

# parameters that must be strictly positive
_POSITIVE = {"m", "l", "m_c", "m_p"}

# per-coordinate half-width of the uniform initial-state box
INITIAL_BOX = {
    "temperature": (2.0,),
    "spring": (1.0, 1.0),
    "pendulum": (1.0, 1.0),
    "cartpole": (0.1, 0.05, 0.05, 0.05),
}

# cartpole episode ends once the pole or the cart leaves these bounds
CARTPOLE_ANGLE_LIMIT = 0.2
CARTPOLE_POSITION_LIMIT = 2.4

DEFAULT_DT = 0.01
DEFAULT_HORIZON = 500


class NonFiniteStateError(FloatingPointError):
    """Raised when a state, action or derivative stops being finite."""


@dataclass(frozen=True)
class FaultTransform:
    """Matrices mapping source dynamics onto faulted target dynamics."""

    F_A: np.ndarray
    F_B: np.ndarray

    def __post_init__(self):
        F_A = np.atleast_2d(np.asarray(self.F_A, dtype=float))
        F_B = np.atleast_2d(np.asarray(self.F_B, dtype=float))
        for name, F in (("F_A", F_A), ("F_B", F_B)):
            if F.ndim != 2 or F.shape[0] != F.shape[1]:
                raise ValueError(f"{name} must be square, got shape {F.shape}")
        if F_A.shape != F_B.shape:
            raise ValueError(f"F_A {F_A.shape} and F_B {F_B.shape} differ in shape")
        F_A.flags.writeable = False
        F_B.flags.writeable = False
        object.__setattr__(self, "F_A", F_A)
        object.__setattr__(self, "F_B", F_B)

    @property
    def n(self) -> int:
        return self.F_A.shape[0]

    @classmethod
    def identity(cls, n: int) -> "FaultTransform":
        return cls(np.eye(n), np.eye(n))

    @classmethod
    def scaled(cls, n: int, a_scale: float, b_scale: float) -> "FaultTransform":
        return cls(a_scale * np.eye(n), b_scale * np.eye(n))

    def definiteness(self) -> dict:
        """Definiteness class of the symmetric part of each matrix."""
        return {"F_A": _definiteness(self.F_A), "F_B": _definiteness(self.F_B)}


def _definiteness(F: np.ndarray) -> str:
    eig = np.linalg.eigvalsh(0.5 * (F + F.T))
    if np.all(eig > 0):
        return "positive definite"
    if np.all(eig < 0):
        return "negative definite"
    if np.all(eig >= 0):
        return "positive semidefinite"
    if np.all(eig <= 0):
        return "negative semidefinite"
    return "indefinite"


@dataclass(frozen=True)
class SystemSpec:
    name: str
    params: Mapping[str, float]
    dt: float = DEFAULT_DT
    fault: Optional[FaultTransform] = None
    action_bounds: tuple = ((-1.0, 1.0),)
    stable_friction: bool = False

    @property
    def n(self) -> int:
        return DIMENSIONS[self.name][0]

    @property
    def m(self) -> int:
        return DIMENSIONS[self.name][1]

    @property
    def is_linear(self) -> bool:
        return self.name in ("temperature", "spring")

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.action_bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.action_bounds])

    def clip(self, u):
        return np.clip(u, self.lower, self.upper)


def make_system(
    name: str,
    param_overrides: Optional[Mapping[str, float]] = None,
    dt: float = DEFAULT_DT,
    fault: Optional[FaultTransform] = None,
    action_bounds=None,
    stable_friction: bool = False,
) -> SystemSpec:
    """Build one of the four benchmark systems with default parameters."""
    if name not in DEFAULT_PARAMS:
        raise ValueError(f"unknown system {name!r}; expected one of {SYSTEMS}")
    params = dict(DEFAULT_PARAMS[name])
    for key, value in (param_overrides or {}).items():
        if key not in params:
            raise ValueError(f"unknown parameter {key!r} for {name}; known: {sorted(params)}")
        params[key] = float(value)
    for key in _POSITIVE & params.keys():
        if not params[key] > 0:
            raise ValueError(f"{name}.{key} must be > 0, got {params[key]}")
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    n, m = DIMENSIONS[name]
    if action_bounds is None:
        action_bounds = ((-1.0, 1.0),) * m
    action_bounds = tuple((float(lo), float(hi)) for lo, hi in action_bounds)
    if len(action_bounds) != m or any(lo > hi for lo, hi in action_bounds):
        raise ValueError(f"action_bounds must hold {m} ordered intervals")
    if fault is not None and fault.n != n:
        raise ValueError(f"fault is {fault.n}x{fault.n}, system state dimension is {n}")
    return SystemSpec(
        name=name,
        params=types.MappingProxyType(params),
        dt=float(dt),
        fault=fault,
        action_bounds=action_bounds,
        stable_friction=stable_friction,
    )


def apply_fault(spec: SystemSpec, F_A, F_B) -> SystemSpec:
    """Return a copy of ``spec`` whose drift and input terms are multiplied by F_A, F_B."""
    fault = F_A if isinstance(F_A, FaultTransform) and F_B is None else FaultTransform(F_A, F_B)
    if fault.n != spec.n:
        raise ValueError(f"fault is {fault.n}x{fault.n}, {spec.name} has n={spec.n}")
    return dataclasses.replace(spec, fault=fault)


def nominal(spec: SystemSpec) -> SystemSpec:
    return dataclasses.replace(spec, fault=None)


def linear_matrices(spec: SystemSpec):
    """(A, B) of the unfaulted temperature or spring system."""
    p = spec.params
    if spec.name == "temperature":
        return np.array([[p["a"]]]), np.array([[p["b"]]])
    if spec.name == "spring":
        friction = -p["k_f"] / p["m"] if spec.stable_friction else p["k_f"] / p["m"]
        A = np.array([[0.0, 1.0], [-p["k"] / p["m"], friction]])
        B = np.array([[0.0], [1.0 / p["m"]]])
        return A, B
    raise ValueError(f"{spec.name} is not a linear system")


def factors(spec: SystemSpec, x: np.ndarray):
    """Drift f_A(x), shape (..., n), and input map g_B(x), shape (..., n, m)."""
    p = spec.params
    if spec.is_linear:
        A, B = linear_matrices(spec)
        return x @ A.T, np.broadcast_to(B, x.shape[:-1] + B.shape)

    if spec.name == "pendulum":
        th, om = x[..., 0], x[..., 1]
        inertia = p["m"] * p["l"] ** 2
        f = np.stack([om, -p["g"] / p["l"] * np.sin(th) - p["k_f"] / inertia * om], axis=-1)
        g = np.zeros(x.shape[:-1] + (2, 1))
        g[..., 1, 0] = 1.0 / inertia
        return f, g

    # cartpole: x = [pole angle, pole rate, cart position, cart velocity]
    th, om, v = x[..., 0], x[..., 1], x[..., 3]
    m_c, m_p, l, grav, k_f = p["m_c"], p["m_p"], p["l"], p["g"], p["k_f"]
    sin, cos = np.sin(th), np.cos(th)
    denom = m_c + m_p - m_p * cos**2
    # cart acceleration first; the pole equation depends on it
    acc_drift = m_p * sin * (grav * cos - l * om**2) / denom
    acc_gain = 1.0 / denom
    pole_drift = grav / l * sin - k_f * om / (m_p * l**2) + acc_drift * cos / l
    pole_gain = acc_gain * cos / l
    f = np.stack([om, pole_drift, v, acc_drift], axis=-1)
    g = np.zeros(x.shape[:-1] + (4, 1))
    g[..., 1, 0] = pole_gain
    g[..., 3, 0] = acc_gain
    return f, g


def _derivative(spec: SystemSpec, x, u):
    f, g = factors(spec, x)
    bu = np.einsum("...ij,...j->...i", g, u)
    if spec.fault is not None:
        f = f @ spec.fault.F_A.T
        bu = bu @ spec.fault.F_B.T
    return f + bu


def _as_state(spec: SystemSpec, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = u.reshape(1)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != spec.n:
        raise ValueError(f"{spec.name} expects state dimension {spec.n}, got {x.shape}")
    if u.shape[-1] != spec.m:
        raise ValueError(f"{spec.name} expects action dimension {spec.m}, got {u.shape}")
    return x, u


def derivative(spec: SystemSpec, x, u) -> np.ndarray:
    """Continuous-time state derivative."""
    x, u = _as_state(spec, x, u)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise NonFiniteStateError("non-finite state or action")
    return _derivative(spec, x, u)


def step(spec: SystemSpec, x, u, check: bool = True) -> np.ndarray:
    """One explicit-Euler step ``x + dt * xdot``. ``u`` is applied as given (no clipping)."""
    x, u = _as_state(spec, x, u)
    if check and not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise NonFiniteStateError("non-finite state or action")
    x_next = x + spec.dt * _derivative(spec, x, u)
    if check and not np.all(np.isfinite(x_next)):
        raise NonFiniteStateError(f"{spec.name} state diverged")
    return x_next


@dataclass(frozen=True)
class LinearDynamics:
    """Continuous-time pair (A, B) together with the Euler step size."""

    A: np.ndarray
    B: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim < 2:
            B = B.reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def A_d(self) -> np.ndarray:
        return np.eye(self.n) + self.dt * self.A

    @property
    def B_d(self) -> np.ndarray:
        return self.dt * self.B

    @property
    def P(self) -> np.ndarray:
        """Discrete one-step map ``[I + dt A, dt B]``."""
        return np.hstack([self.A_d, self.B_d])

    def step(self, x, u):
        return np.asarray(x) @ self.A_d.T + np.asarray(u) @ self.B_d.T

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "B": self.B.tolist(), "dt": self.dt}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LinearDynamics":
        return cls(np.array(d["A"], dtype=float), np.array(d["B"], dtype=float), d["dt"])


FD_STEP = 1e-5


def linearize(spec: SystemSpec, x0=None, u0=None) -> LinearDynamics:
    """Jacobians of the derivative about (x0, u0); origin by default."""
    x0 = np.zeros(spec.n) if x0 is None else np.asarray(x0, dtype=float).reshape(spec.n)
    u0 = np.zeros(spec.m) if u0 is None else np.asarray(u0, dtype=float).reshape(spec.m)
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(u0))):
        raise NonFiniteStateError("linearization point must be finite")

    if spec.is_linear:
        A, B = linear_matrices(spec)
        if spec.fault is not None:
            A, B = spec.fault.F_A @ A, spec.fault.F_B @ B
        return LinearDynamics(A, B, spec.dt)

    A = np.empty((spec.n, spec.n))
    B = np.empty((spec.n, spec.m))
    for j in range(spec.n):
        e = np.zeros(spec.n)
        e[j] = FD_STEP
        A[:, j] = (derivative(spec, x0 + e, u0) - derivative(spec, x0 - e, u0)) / (2 * FD_STEP)
    for j in range(spec.m):
        e = np.zeros(spec.m)
        e[j] = FD_STEP
        B[:, j] = (derivative(spec, x0, u0 + e) - derivative(spec, x0, u0 - e)) / (2 * FD_STEP)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NonFiniteStateError("non-finite Jacobian")
    return LinearDynamics(A, B, spec.dt)


def sample_initial_states(spec: SystemSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    box = np.array(INITIAL_BOX[spec.name])
    return rng.uniform(-box, box, size=(size, spec.n))


def terminated(spec: SystemSpec, x) -> np.ndarray:
    """Boolean mask of states that end an episode (cartpole only)."""
    x = np.asarray(x)
    if spec.name != "cartpole":
        return np.zeros(x.shape[:-1], dtype=bool)
    return (np.abs(x[..., 0]) > CARTPOLE_ANGLE_LIMIT) | (np.abs(x[..., 2]) > CARTPOLE_POSITION_LIMIT)


def default_fault(spec_or_name, a_scale: float = 1.5, b_scale: float = -1.0) -> FaultTransform:
    name = spec_or_name if isinstance(spec_or_name, str) else spec_or_name.name
    return FaultTransform.scaled(DIMENSIONS[name][0], a_scale, b_scale)

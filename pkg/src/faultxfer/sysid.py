"""Least-squares identification of Euler-discretized linear models.

The one-step map ``x' = [I + dt A, dt B] [x; u]`` is fitted to recorded
transitions, then split back into continuous-time ``(A, B)``.  Fault
transforms are recovered from a source/target pair of such fits.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import FaultTransform, LinearDynamics, SystemSpec, sample_initial_states, step, terminated

RANK_RTOL = 1e-8
ILL_CONDITIONED = 1e12
DEFAULT_CAP = 2500
BUFFER_SCHEMA = "faultxfer-trajectory v1"


class IdentificationWarning(UserWarning):
    """Rank deficiency or an ill-posed inversion during identification."""


class BufferCapacityError(ValueError):
    pass


@dataclass
class TrajectoryBuffer:
    """Ordered transitions ``(x_i, u_{i+1}, x_{i+1}, r_{i+1})`` tagged by episode."""

    n: int
    m: int
    dt: float
    tag: str = "t"
    cap: Optional[int] = DEFAULT_CAP
    _x: list = field(default_factory=list, repr=False)
    _u: list = field(default_factory=list, repr=False)
    _xn: list = field(default_factory=list, repr=False)
    _r: list = field(default_factory=list, repr=False)
    _episode: list = field(default_factory=list, repr=False)
    _step: list = field(default_factory=list, repr=False)
    n_episodes: int = 0

    def __len__(self) -> int:
        return len(self._r)

    @property
    def remaining(self) -> float:
        return np.inf if self.cap is None else self.cap - len(self)

    def add_episode(self, xs, us, rs) -> None:
        """Append one episode given states ``x_0..x_T``, actions ``u_1..u_T`` and rewards."""
        xs = np.asarray(xs, dtype=float).reshape(-1, self.n)
        us = np.asarray(us, dtype=float).reshape(-1, self.m)
        rs = np.asarray(rs, dtype=float).reshape(-1)
        T = len(us)
        if len(xs) != T + 1 or len(rs) != T:
            raise ValueError("episode needs T+1 states, T actions and T rewards")
        if T > self.remaining:
            raise BufferCapacityError(f"episode of {T} steps exceeds remaining capacity {self.remaining}")
        ep = self.n_episodes
        for i in range(T):
            self._x.append(xs[i])
            self._u.append(us[i])
            self._xn.append(xs[i + 1])
            self._r.append(rs[i])
            self._episode.append(ep)
            self._step.append(i)
        self.n_episodes += 1

    def add(self, episode: int, step_index: int, x, u, x_next, r) -> None:
        if self.remaining < 1:
            raise BufferCapacityError("buffer is full")
        self._x.append(np.asarray(x, dtype=float).reshape(self.n))
        self._u.append(np.asarray(u, dtype=float).reshape(self.m))
        self._xn.append(np.asarray(x_next, dtype=float).reshape(self.n))
        self._r.append(float(r))
        self._episode.append(int(episode))
        self._step.append(int(step_index))
        self.n_episodes = max(self.n_episodes, int(episode) + 1)

    @property
    def X(self) -> np.ndarray:
        return np.array(self._x).reshape(-1, self.n)

    @property
    def U(self) -> np.ndarray:
        return np.array(self._u).reshape(-1, self.m)

    @property
    def X_next(self) -> np.ndarray:
        return np.array(self._xn).reshape(-1, self.n)

    @property
    def rewards(self) -> np.ndarray:
        return np.array(self._r)

    @property
    def episodes(self) -> np.ndarray:
        return np.array(self._episode, dtype=int)

    @property
    def steps(self) -> np.ndarray:
        return np.array(self._step, dtype=int)

    def episode_returns(self) -> np.ndarray:
        return np.bincount(self.episodes, weights=self.rewards, minlength=self.n_episodes)

    def chained(self) -> bool:
        """True when every record's next state is the following record's state within an episode."""
        X, Xn, ep = self.X, self.X_next, self.episodes
        same = ep[1:] == ep[:-1]
        return bool(np.all(Xn[:-1][same] == X[1:][same]))

    def to_csv(self, path=None) -> str:
        """Columnar text, one transition per row; written to ``path`` if given."""
        buf = io.StringIO()
        buf.write(f"# {BUFFER_SCHEMA} n={self.n} m={self.m} dt={self.dt!r} tag={self.tag}\n")
        writer = csv.writer(buf, lineterminator="\n")
        header = (
            ["episode", "step"]
            + [f"x{j}" for j in range(self.n)]
            + [f"u{j}" for j in range(self.m)]
            + [f"x_next{j}" for j in range(self.n)]
            + ["r"]
        )
        writer.writerow(header)
        for i in range(len(self)):
            writer.writerow(
                [self._episode[i], self._step[i]]
                + [repr(float(v)) for v in self._x[i]]
                + [repr(float(v)) for v in self._u[i]]
                + [repr(float(v)) for v in self._xn[i]]
                + [repr(float(self._r[i]))]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text) -> "TrajectoryBuffer":
        text = path_or_text
        if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
            text = Path(path_or_text).read_text()
        lines = text.splitlines()
        if not lines or not lines[0].startswith(f"# {BUFFER_SCHEMA}"):
            raise ValueError(f"not a {BUFFER_SCHEMA} file")
        meta = dict(tok.split("=", 1) for tok in lines[0][len(BUFFER_SCHEMA) + 2 :].split())
        n, m = int(meta["n"]), int(meta["m"])
        buf = cls(n=n, m=m, dt=float(meta["dt"]), tag=meta.get("tag", "t"), cap=None)
        rows = list(csv.reader(lines[1:]))
        for row in rows[1:]:
            vals = [float(v) for v in row[2:]]
            buf.add(int(row[0]), int(row[1]), vals[:n], vals[n : n + m], vals[n + m : 2 * n + m], vals[-1])
        return buf


def collect_buffer(
    spec: SystemSpec,
    policy,
    n_episodes: int,
    horizon: int,
    exploration_noise_std: float = 0.1,
    seed: int = 0,
    reward_fn=None,
    cap: Optional[int] = DEFAULT_CAP,
    tag: str = "t",
    x0=None,
) -> TrajectoryBuffer:
    """Roll ``policy`` plus Gaussian action noise on ``spec`` and record every transition.

    Actions are ``clip(policy(x) + noise)``; the clipped action is what gets
    recorded.  Cartpole episodes stop at the termination bounds.  Collection
    stops once ``cap`` transitions are stored.
    """
    if exploration_noise_std < 0:
        raise ValueError("exploration_noise_std must be >= 0")
    if cap is not None and n_episodes * horizon > cap:
        raise BufferCapacityError(f"{n_episodes} x {horizon} steps exceeds the cap of {cap}")
    rng = np.random.default_rng(seed)
    buf = TrajectoryBuffer(n=spec.n, m=spec.m, dt=spec.dt, tag=tag, cap=cap)
    if n_episodes == 0:
        return buf
    starts = sample_initial_states(spec, rng, n_episodes) if x0 is None else np.tile(np.asarray(x0, float), (n_episodes, 1))
    for ep in range(n_episodes):
        x = starts[ep].reshape(spec.n)
        xs, us, rs = [x], [], []
        for _ in range(horizon):
            raw = np.asarray(policy(x), dtype=float).reshape(-1)
            if raw.shape != (spec.m,):
                raise ValueError(f"policy returned shape {raw.shape}, system expects ({spec.m},)")
            u = spec.clip(raw + exploration_noise_std * rng.standard_normal(spec.m))
            x_next = step(spec, x, u)
            rs.append(0.0 if reward_fn is None else float(reward_fn(x_next, u)))
            xs.append(x_next)
            us.append(u)
            x = x_next
            if terminated(spec, x):
                break
        buf.add_episode(xs, us, rs)
    return buf


@dataclass
class IdentificationReport:
    dynamics: LinearDynamics
    residual: float
    condition_number: float
    sample_count: int
    rank: int
    warnings: tuple = ()

    @property
    def rank_deficient(self) -> bool:
        return "rank_deficient" in self.warnings

    def to_dict(self) -> dict:
        return {
            "A": self.dynamics.A.tolist(),
            "B": self.dynamics.B.tolist(),
            "dt": self.dynamics.dt,
            "residual": self.residual,
            "condition_number": self.condition_number,
            "sample_count": self.sample_count,
            "rank": self.rank,
            "warnings": list(self.warnings),
        }


def fit_linear(buffer: TrajectoryBuffer) -> IdentificationReport:
    """Least-squares fit of ``X+ ~ P [X; U]`` and recovery of continuous (A, B).

    Solved with an SVD-based least-squares routine; rank-deficient regressors
    give the minimum-norm solution and an ``IdentificationWarning``.
    """
    if len(buffer) == 0:
        raise ValueError("cannot identify from an empty buffer")
    n, m, dt = buffer.n, buffer.m, buffer.dt
    Z = np.hstack([buffer.X, buffer.U])
    Y = buffer.X_next
    sol, _, rank, sv = np.linalg.lstsq(Z, Y, rcond=RANK_RTOL)
    P = sol.T
    flags = []
    if rank < n + m:
        flags.append("rank_deficient")
        warnings.warn(
            f"regressors have rank {rank} < {n + m}; returning the minimum-norm solution",
            IdentificationWarning,
            stacklevel=2,
        )
    A = (P[:, :n] - np.eye(n)) / dt
    B = P[:, n:] / dt
    resid = Y - Z @ P.T
    smin = sv[-1] if len(sv) == n + m else 0.0
    cond = float(sv[0] ** 2 / smin**2) if smin > 0 else float("inf")
    return IdentificationReport(
        dynamics=LinearDynamics(A, B, dt),
        residual=float(np.sqrt(np.mean(resid**2))),
        condition_number=max(cond, 1.0),
        sample_count=len(buffer),
        rank=int(rank),
        warnings=tuple(flags),
    )


def _pinv(M: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(M, rcond=RANK_RTOL)


def estimate_transforms(source: LinearDynamics, target: LinearDynamics) -> FaultTransform:
    """``F_A = A_t pinv(A_s)`` and ``F_B = (B_t B_s^T) pinv(B_s B_s^T)``.

    A singular or ill-conditioned ``A_s`` makes ``F_A`` non-unique; the
    pseudo-inverse is used either way and an ``IdentificationWarning`` raised.
    Only the products ``F_A A_s`` and ``F_B B_s`` are identifiable.
    """
    if source.A.shape != target.A.shape or source.B.shape != target.B.shape:
        raise ValueError("source and target models have different dimensions")
    if not np.isclose(source.dt, target.dt, rtol=0, atol=1e-15):
        raise ValueError(f"dt mismatch: {source.dt} vs {target.dt}")
    sv = np.linalg.svd(source.A, compute_uv=False)
    if sv[0] == 0 or sv[-1] <= RANK_RTOL * sv[0] or sv[0] / sv[-1] > ILL_CONDITIONED:
        warnings.warn("A_s is singular or ill-conditioned; F_A is not unique", IdentificationWarning, stacklevel=2)
    F_A = target.A @ _pinv(source.A)
    F_B = (target.B @ source.B.T) @ _pinv(source.B @ source.B.T)
    return FaultTransform(F_A, F_B)


def controllability_matrix(dyn: LinearDynamics) -> np.ndarray:
    blocks = [dyn.B]
    for _ in range(dyn.n - 1):
        blocks.append(dyn.A @ blocks[-1])
    return np.hstack(blocks)


def controllability_rank(dyn: LinearDynamics) -> int:
    sv = np.linalg.svd(controllability_matrix(dyn), compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > RANK_RTOL * sv[0]))


def relative_error(estimate: LinearDynamics, truth: LinearDynamics) -> float:
    """Relative Frobenius error of the stacked ``[A, B]``."""
    true = np.hstack([truth.A, truth.B])
    return float(np.linalg.norm(np.hstack([estimate.A, estimate.B]) - true) / np.linalg.norm(true))

"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` to see the summary lines.
"""

import time

import numpy as np

from faultxfer.cli import main as cli_main
from faultxfer.config import default_config
from faultxfer.dynamics import LinearDynamics, apply_fault, linearize, make_system, step
from faultxfer.episodes import default_cost
from faultxfer.harness import run_transfer_experiment
from faultxfer.metrics import NOT_REACHED
from faultxfer.policies import ParametricPolicy, TransformedPolicy, lqr_gain, mpc_action, riccati_residual, transform_policy
from faultxfer.rlopt import Batch, TrainConfig, get_params, log_prob, set_params, surrogate
from faultxfer.sysid import TrajectoryBuffer, collect_buffer, fit_linear, relative_error

# summary lines, echoed at the end of the run by conftest.py
RESULTS: list = []

LINEAR = ["temperature", "spring"]
ALL = ["temperature", "spring", "pendulum", "cartpole"]


class Check:
    """Times a criterion and prints one pass/fail line when it finishes."""

    def __init__(self, number: int, budget_s: float):
        self.number, self.budget = number, budget_s
        self.failures: list = []
        self.notes: list = []

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def expect(self, ok: bool, what: str):
        (self.notes if ok else self.failures).append(what)

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        if exc_type is None:
            self.expect(elapsed < self.budget, f"runtime {elapsed:.1f}s < {self.budget:g}s")
        status = "PASS" if exc_type is None and not self.failures else "FAIL"
        detail = "; ".join(self.failures) if self.failures else "; ".join(self.notes)
        if exc_type is not None:
            detail = f"{exc_type.__name__}: {exc}"
        line = f"criterion {self.number}: {status} ({elapsed:.1f}s) {detail}"
        RESULTS.append(line)
        print("\n" + line)
        if exc_type is None:
            assert not self.failures, f"criterion {self.number}: " + "; ".join(self.failures)
        return False


def test_criterion_1_transformation_optimality_linear():
    with Check(1, 10) as c:
        for name in LINEAR:
            rep = run_transfer_experiment(default_config(name, "lqr"))
            t, d = rep.mean("pi_t"), rep.mean("pi_direct")
            rel = abs(t - d) / abs(d)
            c.expect(rep.variants["pi_t"]["n_episodes"] == 100, f"{name} 100 episodes")
            c.expect(rel < 0.01, f"{name} pi_t {t:.4g} vs direct {d:.4g} rel {rel:.2e} < 1%")


def unclipped_closed_loop(spec, policy, x0, steps=500):
    xs, x = [np.asarray(x0, float)], np.asarray(x0, float)
    for _ in range(steps):
        x = step(spec, x, policy(x))
        xs.append(x)
    return np.array(xs)


def test_criterion_2_closed_loop_trajectory_equivalence():
    # exact equivalence needs the drift change inside the input range; the
    # default fault satisfies that on temperature, spring uses a matched fault
    cases = [
        ("temperature", 1.5 * np.eye(1), -np.eye(1), [1.0]),
        ("spring", np.array([[1.0, 0.0], [0.7, 1.5]]), np.array([[1.0, 0.0], [0.3, -1.0]]), [0.5, -0.3]),
    ]
    with Check(2, 1) as c:
        for name, F_A, F_B, x0 in cases:
            spec = make_system(name)
            lin = linearize(spec)
            pi_s = lqr_gain(lin, default_cost(spec))
            pi_t = transform_policy(pi_s, lin.A, lin.B, F_A, F_B)
            src = unclipped_closed_loop(spec, pi_s, x0)
            tgt = unclipped_closed_loop(apply_fault(spec, F_A, F_B), pi_t, x0)
            err = float(np.max(np.abs(tgt - src)))
            c.expect(err < 1e-9, f"{name} max deviation {err:.1e} < 1e-9 over 500 steps")


def test_criterion_3_positive_transfer_known_fault():
    with Check(3, 120) as c:
        for name in ALL:
            rep = run_transfer_experiment(default_config(name, "lqr"))
            s, t = rep.mean("pi_s"), rep.mean("pi_t")
            c.expect(t > s, f"{name} pi_t {t:.4g} > pi_s {s:.4g}")
            c.expect(rep.gap_closed >= 0.5, f"{name} gap closed {rep.gap_closed:.3f} >= 0.5")


def test_criterion_4_identified_transform_transfer():
    with Check(4, 300) as c:
        for name in ["temperature", "spring", "pendulum"]:
            cfg = default_config(name, "rl", fault={"mode": "identify"}, controller={"variants": ["pi_s", "pi_t"]})
            rep = run_transfer_experiment(cfg)
            c.expect(not rep.failures, f"{name} no failed seeds")
            c.expect(len(rep.per_seed) == 5, f"{name} 5 seeds")
            for rec in rep.per_seed:
                c.expect(max(rec["identification"]["interactions"]) <= 2500, f"{name} seed {rec['seed']} within budget")
            js = np.subtract(rep.variants["pi_t"]["per_seed_mean"], rep.variants["pi_s"]["per_seed_mean"])
            c.expect(bool(np.all(js > 0)), f"{name} per-seed jumpstart min {js.min():.4g} > 0")


def test_criterion_5_system_identification_recovery():
    with Check(5, 1) as c:
        rng = np.random.default_rng(0)
        worst = 0.0
        for n, m in [(1, 1), (2, 1), (4, 1), (3, 2)]:
            dyn = LinearDynamics(rng.normal(size=(n, n)) * 3, rng.normal(size=(n, m)) * 3, 0.01)
            k = 2 * (n + m)
            X, U = rng.normal(size=(k, n)), rng.normal(size=(k, m))
            buf = TrajectoryBuffer(n=n, m=m, dt=dyn.dt, cap=None)
            for i, (x, u, xn) in enumerate(zip(X, U, dyn.step(X, U))):
                buf.add(i, 0, x, u, xn, 0.0)
            worst = max(worst, relative_error(fit_linear(buf).dynamics, dyn))
        c.expect(worst < 1e-6, f"noiseless error {worst:.1e} < 1e-6")
        for name in LINEAR:
            spec = make_system(name)
            clean = collect_buffer(spec, lambda x: np.zeros((len(np.atleast_2d(x)), 1)), 5, 500, 1.0, seed=0, cap=None)
            noisy = TrajectoryBuffer(n=spec.n, m=1, dt=spec.dt, cap=None)
            X = clean.X + 1e-3 * rng.standard_normal(clean.X.shape)
            Xn = clean.X_next + 1e-3 * rng.standard_normal(clean.X.shape)
            U = clean.U
            for i in range(len(clean)):
                noisy.add(0, i, X[i], U[i], Xn[i], 0.0)
            err = relative_error(fit_linear(noisy).dynamics, linearize(spec))
            c.expect(len(noisy) == 2500 and err < 1e-2, f"{name} noisy error {err:.1e} < 1e-2")


def test_criterion_6_mpc_consistency():
    with Check(6, 30) as c:
        rep = run_transfer_experiment(default_config("spring", "mpc"))
        t, d = rep.mean("pi_t"), rep.mean("pi_direct")
        pooled = float(np.sqrt((rep.std("pi_t") ** 2 + rep.std("pi_direct") ** 2) / 2))
        c.expect(abs(t - d) <= pooled, f"|{t:.4g} - {d:.4g}| = {abs(t - d):.3g} <= pooled std {pooled:.3g}")


def _fd_gradient(policy, batch, cfg, trainable_set, h=1e-6):
    p0 = get_params(policy, trainable_set)
    g = np.zeros_like(p0)
    for i in range(p0.size):
        for sign in (1, -1):
            p = p0.copy()
            p[i] += sign * h
            set_params(policy, p, trainable_set)
            g[i] += sign * surrogate(policy, batch, cfg, trainable_set)[0]
    set_params(policy, p0, trainable_set)
    return g / (2 * h)


def test_criterion_7_riccati_gradient_mpc_properties():
    with Check(7, 30) as c:
        for name in ALL:
            spec = make_system(name)
            lin, cost = linearize(spec), default_cost(spec)
            res = riccati_residual(lin, cost, lqr_gain(lin, cost).P)
            c.expect(res < 1e-8, f"{name} Riccati residual {res:.1e} < 1e-8")

        rng = np.random.default_rng(0)
        worst = 0.0
        for k in range(20):
            n = 1 + k % 4
            base = ParametricPolicy(n, 1, 6, rng=rng, init_log_std=rng.uniform(-1, 0.5))
            base.theta = base.theta + rng.normal(scale=0.5, size=base.size)
            pi, ts = (base, "all") if k % 2 == 0 else (
                TransformedPolicy(base, rng.normal(size=(1, 1)), rng.normal(size=(1, n))), "source_plus_transform")
            X = rng.normal(size=(40, n))
            U = np.asarray(pi(X)) + rng.normal(size=(40, 1))
            adv = rng.normal(size=40)
            batch = Batch(X, U, log_prob(pi, X, U) + rng.uniform(-0.1, 0.1, 40), adv.copy(), adv)
            cfg = TrainConfig(trainable_set=ts)
            g, fd = surrogate(pi, batch, cfg)[1], _fd_gradient(pi, batch, cfg, ts)
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12))
        c.expect(worst < 1e-4, f"surrogate gradient vs finite differences {worst:.1e} < 1e-4 (20 batches)")

        for name in LINEAR:
            spec = make_system(name)
            lin, cost = linearize(spec), default_cost(spec)
            K = lqr_gain(lin, cost).K
            rel = 0.0
            for x in np.random.default_rng(1).uniform(-1, 1, (5, spec.n)):
                u_lqr = -K @ x
                rel = max(rel, float(np.linalg.norm(mpc_action(lin, cost, 200, x) - u_lqr) / np.linalg.norm(u_lqr)))
            c.expect(rel < 1e-3, f"{name} MPC-200 vs LQR action {rel:.1e} < 1e-3")


def test_criterion_8_rl_finetuning_timeline():
    with Check(8, 1800) as c:
        cfg = default_config("cartpole", "rl", fault={"mode": "identify"},
                             controller={"variants": ["pi_s", "pi_s_star", "pi_t", "pi_t_minus"]})
        rep = run_transfer_experiment(cfg)
        c.expect(not rep.failures, "no failed seeds")
        reached = 0
        for rec in rep.per_seed:
            # every deterministic evaluation episode at the 500-step cap
            reached += any(v == 500.0 for v in rec["curves"]["pi_t_minus"]["eval_mean"])
        c.expect(reached >= 3, f"pi_t- reaches the cap on {reached}/5 seeds (need 3)")

        def steps(v):
            return np.inf if v == NOT_REACHED else v

        t_minus = [steps(v) for v in rep.time_to_threshold["pi_t_minus"]["env_steps"]]
        s_star = [steps(v) for v in rep.time_to_threshold["pi_s_star"]["env_steps"]]
        faster = sum(a < b for a, b in zip(t_minus, s_star))
        c.expect(faster >= 4, f"pi_t- faster to threshold {rep.threshold:.4g} on {faster}/5 seeds (need 4); "
                              f"steps pi_t- {t_minus} pi_s* {s_star}")


def test_criterion_9_reproduce_determinism(tmp_path, capsys):
    small_rl = tmp_path / "rl.yaml"
    small_rl.write_text(
        "system: temperature\ncontroller: {family: rl, variants: [pi_s, pi_s_star, pi_t, pi_t_minus, pi_t_plus]}\n"
        "fault: {mode: identify}\nseeds: [0, 1]\nevaluation: {episodes: 4}\n"
        "training: {source_iterations: 3, finetune_iterations: 3, steps_per_iteration: 500, minibatch_size: 250,"
        " epochs: 2, eval_episodes: 3, hidden: 8}\n"
    )
    runs = [
        ["reproduce", "lqr-table"],
        ["reproduce", "mpc-table", "--system", "spring"],
        ["reproduce", "rl-identified-table", "--config", str(small_rl)],
        ["reproduce", "learning-curves", "--config", str(small_rl)],
    ]
    with Check(9, 600) as c:
        for k, argv in enumerate(runs):
            outs = [tmp_path / f"{k}_{r}" for r in "ab"]
            codes = [cli_main(argv + ["--out", str(o)]) for o in outs]
            capsys.readouterr()
            c.expect(codes == [0, 0], f"{argv[1]} exit codes {codes}")
            files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.name != "manifest.json")
            same = bool(files) and all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
            c.expect(same, f"{argv[1]} {len(files)} files byte-identical")

"""End-to-end transfer experiments.

For every seed: obtain a source policy on the nominal plant, introduce the
fault, identify (or take as given) the fault transforms, build the
transformed policy, evaluate all requested variants on the faulted plant and,
for the RL family, fine-tune and record learning curves.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .dynamics import (
    LinearDynamics,
    SystemSpec,
    apply_fault,
    linearize,
    make_system,
    sample_initial_states,
)
from .episodes import episode_rewards, reward_for
from .metrics import NOT_REACHED, compute_metrics, threshold_level, time_to_threshold
from .policies import MPCPolicy, ParametricPolicy, QuadraticCost, lqr_gain, transform_policy
from .rlopt import TrainConfig, train
from .sysid import collect_buffer, estimate_transforms, fit_linear

log = logging.getLogger(__name__)

TABLE_SCHEMA = "faultxfer-table v1"
CURVE_SCHEMA = "faultxfer-curves v1"

ROW_LABELS = {
    "pi_s": "pi_s on P_t",
    "pi_s_star": "pi_s* on P_t",
    "pi_t": "pi_t on P_t",
    "pi_t_minus": "pi_t- on P_t",
    "pi_t_plus": "pi_t+ on P_t",
}

_LQR_CACHE: dict = {}


def cached_lqr(dyn: LinearDynamics, cost: QuadraticCost):
    key = (dyn.A.tobytes(), dyn.B.tobytes(), dyn.dt, cost.Q.tobytes(), cost.R.tobytes(), cost.setpoint.tobytes())
    if key not in _LQR_CACHE:
        _LQR_CACHE[key] = lqr_gain(dyn, cost)
    return _LQR_CACHE[key]


def _seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def _matrix(value, n: int) -> np.ndarray:
    if isinstance(value, (int, float)):
        return float(value) * np.eye(n)
    return np.array(value, dtype=float)


def direct_label(family: str) -> str:
    return {"lqr": "pi_lqr on P_t", "mpc": "pi_mpc on P_t", "rl": "pi_lqr on P_t"}[family]


@dataclass
class TransferReport:
    system: str
    family: str
    fault_mode: str
    seeds: list
    variants: dict = field(default_factory=dict)
    jumpstart: Optional[float] = None
    gap_closed: Optional[float] = None
    threshold: Optional[float] = None
    asymptotic: dict = field(default_factory=dict)
    time_to_threshold: dict = field(default_factory=dict)
    per_seed: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def mean(self, variant: str) -> float:
        return self.variants[variant]["mean"]

    def std(self, variant: str) -> float:
        return self.variants[variant]["std"]

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "tool_version": __version__,
                "system": self.system,
                "family": self.family,
                "fault_mode": self.fault_mode,
                "seeds": self.seeds,
                "variants": self.variants,
                "jumpstart": self.jumpstart,
                "gap_closed": self.gap_closed,
                "threshold": self.threshold,
                "asymptotic": self.asymptotic,
                "time_to_threshold": self.time_to_threshold,
                "per_seed": self.per_seed,
                "failures": self.failures,
                "config": self.config,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_text(self) -> str:
        rows = [("variant", "mean", "std", "episodes")]
        for name, v in self.variants.items():
            label = direct_label(self.family) if name == "pi_direct" else ROW_LABELS[name]
            rows.append((label, f"{v['mean']:.2f}", f"{v['std']:.2f}", str(v["n_episodes"])))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [f"{self.system} / {self.family} / fault {self.fault_mode} / seeds {self.seeds}"]
        for r in rows:
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if self.jumpstart is not None:
            lines.append(f"jumpstart (pi_t - pi_s): {self.jumpstart:.4g}")
        if self.gap_closed is not None:
            lines.append(f"gap closed toward direct baseline: {self.gap_closed:.3f}")
        for name, ttt in self.time_to_threshold.items():
            lines.append(f"time to threshold {name}: {ttt}")
        for f in self.failures:
            lines.append(f"FAILED seed {f['seed']} at {f['stage']}: {f['error']}")
        return "\n".join(lines) + "\n"

    def table_rows(self):
        for name, v in self.variants.items():
            label = direct_label(self.family) if name == "pi_direct" else ROW_LABELS[name]
            yield [label, self.system, _fmt(v["mean"]), _fmt(v["std"]), v["n_episodes"]]

    def to_table_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {TABLE_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "system", "mean", "std", "n_episodes"])
        w.writerows(self.table_rows())
        return buf.getvalue()

    def curve_rows(self):
        """Long-format rows: seed, iteration, env_steps, variant, batch mean/std, entropy, evaluation mean/std."""
        for entry in self.per_seed:
            for name, curve in entry.get("curves", {}).items():
                yield from curve_rows(entry["seed"], name, curve)

    def to_curves_csv(self) -> str:
        buf = io.StringIO()
        faults = {e["seed"]: e.get("fault_index") for e in self.per_seed}
        buf.write(f"# {CURVE_SCHEMA} fault_env_steps={json.dumps(faults, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        w.writerows(self.curve_rows())
        return buf.getvalue()


CURVE_COLUMNS = ["seed", "iteration", "env_steps", "variant", "mean_reward", "std", "entropy", "eval_mean", "eval_std"]


def curve_rows(seed: int, variant: str, curve: dict):
    """CSV rows of one learning curve (``LearningCurve.to_dict()`` form); a missing evaluation track is blank."""
    n = len(curve["environment_steps"])
    ev_mean = curve.get("eval_mean") or [None] * n
    ev_std = curve.get("eval_std") or [None] * n
    cols = zip(curve["environment_steps"], curve["mean_episodic_reward"], curve["reward_std"],
               curve["policy_entropy"], ev_mean, ev_std)
    for i, (steps, *values) in enumerate(cols):
        yield [seed, i, steps, variant] + [_fmt(v) for v in values]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _train_config(cfg: ExperimentConfig, iterations: int, seed: int, trainable_set: str = "all",
                  eval_seed: int = 0) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        gamma=t.gamma,
        steps_per_iteration=t.steps_per_iteration,
        iterations=iterations,
        clip_ratio=t.clip_ratio,
        learning_rate=t.learning_rate,
        minibatch_size=t.minibatch_size,
        epochs=t.epochs,
        entropy_coefficient=t.entropy_coefficient,
        max_grad_norm=t.max_grad_norm,
        seed=seed,
        trainable_set=trainable_set,
        horizon=cfg.system.horizon,
        eval_episodes=t.eval_episodes,
        eval_seed=eval_seed,
    )


@dataclass(frozen=True)
class Problem:
    source: SystemSpec
    target: SystemSpec
    cost: QuadraticCost
    reward_source: Callable
    reward_target: Callable


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Nominal and faulted plants, synthesis cost and evaluation rewards of a config."""
    sc = cfg.system
    spec_s = make_system(sc.name, sc.params, sc.dt, stable_friction=sc.stable_friction)
    n = spec_s.n
    spec_t = apply_fault(spec_s, _matrix(cfg.fault.F_A, n), _matrix(cfg.fault.F_B, n))
    cost = QuadraticCost.diagonal(cfg.cost.Q, cfg.cost.R, cfg.cost.setpoint)
    return Problem(spec_s, spec_t, cost, reward_for(spec_s, cfg.cost.reward, cost), reward_for(spec_t, cfg.cost.reward, cost))


def run_seed(cfg: ExperimentConfig, seed: int, source_policy=None, stage: Optional[list] = None) -> dict:
    """Run the whole pipeline for one seed and return a JSON-ready record."""
    stage = stage if stage is not None else [""]
    sc = cfg.system
    stage[0] = "setup"
    p = build_problem(cfg)
    spec_s, spec_t, cost, reward, reward_t = p.source, p.target, p.cost, p.reward_source, p.reward_target
    fault, n = spec_t.fault, spec_s.n
    lin_s, lin_t = linearize(spec_s), linearize(spec_t)
    family = cfg.controller.family
    record: dict = {"seed": seed, "fault": {"F_A": fault.F_A, "F_B": fault.F_B}}

    # (1) source policy on the nominal plant
    stage[0] = "source policy"
    curves = {}
    if family == "lqr":
        pi_s, pi_direct = cached_lqr(lin_s, cost), cached_lqr(lin_t, cost)
    elif family == "mpc":
        H = cfg.controller.mpc_horizon
        pi_s, pi_direct = MPCPolicy(lin_s, cost, H), MPCPolicy(lin_t, cost, H)
    else:
        pi_direct = cached_lqr(lin_t, cost)
        if source_policy is not None:
            pi_s = source_policy.copy()
        else:
            pi_s = ParametricPolicy(n, spec_s.m, cfg.training.hidden, rng=np.random.default_rng(_seed(seed, 1)))
            pi_s, curve = train(pi_s, spec_s, reward, _train_config(cfg, cfg.training.source_iterations, _seed(seed, 2),
                                                             eval_seed=_seed(seed, 0)))
            curves["pi_s"] = curve.to_dict()
    fault_index = curves["pi_s"]["environment_steps"][-1] if "pi_s" in curves else 0
    record["fault_index"] = fault_index

    # (2)-(3) transforms: given, or identified from source/target buffers
    stage[0] = "transforms"
    if cfg.fault.mode == "known":
        A_s, B_s, F_A, F_B = lin_s.A, lin_s.B, fault.F_A, fault.F_B
    else:
        b = cfg.budget
        horizon = max(1, min(sc.horizon, b.max_interactions // b.episodes))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            d_s = collect_buffer(spec_s, pi_s, b.episodes, horizon, b.exploration_noise, _seed(seed, 3),
                                 reward_fn=reward, cap=b.max_interactions, tag="s")
            d_t = collect_buffer(spec_t, pi_s, b.episodes, horizon, b.exploration_noise, _seed(seed, 4),
                                 reward_fn=reward_t, cap=b.max_interactions, tag="t")
            rep_s, rep_t = fit_linear(d_s), fit_linear(d_t)
            est = estimate_transforms(rep_s.dynamics, rep_t.dynamics)
        A_s, B_s, F_A, F_B = rep_s.dynamics.A, rep_s.dynamics.B, est.F_A, est.F_B
        record["identification"] = {
            "source": rep_s.to_dict(),
            "target": rep_t.to_dict(),
            "interactions": [len(d_s), len(d_t)],
            "F_A_hat": F_A,
            "F_B_hat": F_B,
            # only the products act on the plant, so report their errors
            "composed_error_A": float(np.linalg.norm(F_A @ A_s - lin_t.A) / np.linalg.norm(lin_t.A)),
            "composed_error_B": float(np.linalg.norm(F_B @ B_s - lin_t.B) / np.linalg.norm(lin_t.B)),
            "warnings": sorted({str(w.message) for w in caught}),
        }

    # (4) transformed policy
    stage[0] = "transform policy"
    pi_t = transform_policy(pi_s, A_s, B_s, F_A, F_B)
    record["rho"] = pi_t.rho
    record["drift_mismatch"] = pi_t.drift_mismatch
    record["M"] = pi_t.M
    record["K_add"] = pi_t.K_add

    # (5)-(6) fine-tuning and evaluation
    policies = {"pi_s": pi_s, "pi_t": pi_t, "pi_direct": pi_direct}
    if family == "rl":
        stage[0] = "fine-tuning"
        tuned = {
            "pi_s_star": (pi_s.copy(), "all"),
            "pi_t_minus": (pi_t.copy(), "source_params_only"),
            "pi_t_plus": (pi_t.copy(), "source_plus_transform"),
        }
        for k, (name, (policy, trainable)) in enumerate(tuned.items()):
            if name not in cfg.controller.variants:
                continue
            tc = _train_config(cfg, cfg.training.finetune_iterations, _seed(seed, 10 + k), trainable, _seed(seed, 0))
            policy, curve = train(policy, spec_t, reward_t, tc, step_offset=fault_index)
            policies[name] = policy
            curves[name] = curve.to_dict()

    stage[0] = "evaluation"
    x0 = sample_initial_states(spec_t, np.random.default_rng(_seed(seed, 0)), cfg.evaluation.episodes)
    record["returns"] = {}
    for name in cfg.controller.variants + (["pi_direct"] if "pi_direct" not in cfg.controller.variants else []):
        record["returns"][name] = episode_rewards(spec_t, policies[name], reward_t, x0, sc.horizon)
    record["curves"] = curves
    return record


def run_transfer_experiment(cfg: ExperimentConfig, source_policies: Optional[dict] = None) -> TransferReport:
    """Execute the transfer pipeline for every seed in ``cfg`` and aggregate.

    ``source_policies`` optionally maps seed -> a pre-trained RL source policy,
    skipping source training.  A failing seed is recorded and skipped.
    """
    report = TransferReport(
        system=cfg.system.name,
        family=cfg.controller.family,
        fault_mode=cfg.fault.mode,
        seeds=list(cfg.seeds),
        config=cfg.to_dict(),
    )
    records = []
    for seed in cfg.seeds:
        stage = [""]
        try:
            src = (source_policies or {}).get(seed)
            records.append(run_seed(cfg, seed, src, stage))
        except Exception as exc:  # any stage failure aborts only this seed
            log.warning("seed %s failed at %s: %s", seed, stage[0], exc)
            report.failures.append({"seed": seed, "stage": stage[0], "error": f"{type(exc).__name__}: {exc}"})
    if not records:
        return report

    # pooled across seeds; the direct baseline is always evaluated for the threshold
    names = list(records[0]["returns"])
    for name in names:
        pooled = np.concatenate([r["returns"][name] for r in records])
        if name in cfg.controller.variants:
            report.variants[name] = {
                "mean": float(pooled.mean()),
                "std": float(pooled.std()),
                "n_episodes": int(pooled.size),
                "per_seed_mean": [float(np.mean(r["returns"][name])) for r in records],
            }
    means = {name: float(np.mean(np.concatenate([r["returns"][name] for r in records]))) for name in names}
    report.jumpstart = means["pi_t"] - means["pi_s"]
    gap = means["pi_direct"] - means["pi_s"]
    report.gap_closed = float(report.jumpstart / gap) if gap != 0 else None
    threshold = cfg.evaluation.threshold
    report.threshold = threshold_level(means["pi_direct"]) if threshold is None else threshold

    if cfg.controller.family == "rl":
        for name in ("pi_s_star", "pi_t_minus", "pi_t_plus"):
            if name not in cfg.controller.variants:
                continue
            ttt_iter, ttt_steps = [], []
            for r in records:
                curve = r["curves"][name]
                it = time_to_threshold(curve, report.threshold)
                ttt_iter.append(it)
                ttt_steps.append(NOT_REACHED if it == NOT_REACHED else curve["environment_steps"][it] - r["fault_index"])
            report.time_to_threshold[name] = {"iterations": ttt_iter, "env_steps": ttt_steps}
            if name != "pi_s_star" and "pi_s_star" in cfg.controller.variants:
                report.asymptotic[name] = [
                    compute_metrics(r["curves"].get("pi_s"), r["curves"][name],
                                    r["curves"]["pi_s_star"], report.threshold).asymptotic
                    for r in records
                ]

    for r in records:
        entry = {k: v for k, v in r.items() if k != "returns"}
        entry["returns"] = {k: v for k, v in r["returns"].items()}
        report.per_seed.append(_jsonable(entry))
    return report

"""Command-line front end.

Subcommands: simulate, identify, transfer, train, evaluate, reproduce and
show-config.  Artifacts are staged in memory and only written once a command
has succeeded; every run leaves a ``manifest.json`` listing what it wrote.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import io
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .config import PRESETS, ConfigError, config_from_dict, default_config, emit_config, parse_config
from .dynamics import SYSTEMS, LinearDynamics, linearize
from .harness import (
    CURVE_COLUMNS,
    CURVE_SCHEMA,
    TransferReport,
    _seed,
    build_problem,
    cached_lqr,
    curve_rows,
    run_transfer_experiment,
)
from .policies import (
    MPCPolicy,
    ParametricPolicy,
    load_policy,
    policy_to_dict,
    transform_policy,
    zero_policy,
)
from .rlopt import LearningCurve, evaluate_policy, train
from .sysid import TrajectoryBuffer, collect_buffer, estimate_transforms, fit_linear

OUT_ENV = "FAULTXFER_OUT"
DEFAULT_OUT = "faultxfer-out"

log = logging.getLogger("faultxfer")


class CommandError(Exception):
    """A failure with a one-line cause for the user."""


# --------------------------------------------------------------------------
# artifacts


class Artifacts:
    """Collects output files and writes them together, or not at all."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str) -> None:
        if name in self.files:
            raise CommandError(f"duplicate artifact {name}")
        self.files[name] = text

    def add_json(self, name: str, obj) -> None:
        self.add(name, json.dumps(obj, indent=1, sort_keys=True) + "\n")

    def commit(self, cfg_hash: Optional[str], seeds, command: str) -> list:
        written = []
        try:
            for name, text in self.files.items():
                path = self.out / name
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_name(path.name + ".partial")
                tmp.write_text(text, encoding="utf-8")
                os.replace(tmp, path)
                written.append(path)
            manifest = {
                "command": command,
                "config_hash": cfg_hash,
                "tool_version": __version__,
                "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
                "seeds": list(seeds),
                "outputs": [
                    {"path": name, "sha256": hashlib.sha256(text.encode()).hexdigest()}
                    for name, text in sorted(self.files.items())
                ],
            }
            path = self.out / "manifest.json"
            path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
            written.append(path)
        except BaseException:
            for path in written:
                path.unlink(missing_ok=True)
            for path in self.out.glob("**/*.partial"):
                path.unlink(missing_ok=True)
            raise
        return written


# --------------------------------------------------------------------------
# helpers


def _parse_seeds(text: str) -> list:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CommandError(f"--seed expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise CommandError("--seed is empty")
    return seeds


def _parse_vector(text: Optional[str], n: int, flag: str):
    if text is None:
        return None
    try:
        v = np.array([float(s) for s in text.split(",")])
    except ValueError:
        raise CommandError(f"{flag} expects comma-separated numbers") from None
    if v.shape != (n,):
        raise CommandError(f"{flag} needs {n} values, got {v.size}")
    return v


def load_config(args, family: Optional[str] = None):
    """Config from ``--config``, else defaults for ``--system``; ``--seed`` overrides seeds."""
    if getattr(args, "config", None):
        cfg = parse_config(args.config)
    else:
        cfg = default_config(args.system or "temperature", family or "lqr")
    if getattr(args, "seed", None):
        cfg.seeds = _parse_seeds(args.seed)
    return cfg


def _policy_for(name: str, cfg, problem, plant):
    """A saved policy file, or one of the keywords zero / lqr / mpc."""
    spec = problem.target if plant == "target" else problem.source
    if name == "zero":
        return zero_policy(spec.n, spec.m)
    if name in ("lqr", "mpc"):
        lin = linearize(spec)
        if name == "lqr":
            return cached_lqr(lin, problem.cost)
        return MPCPolicy(lin, problem.cost, cfg.controller.mpc_horizon)
    path = Path(name)
    if not path.is_file():
        raise CommandError(f"policy file not found: {path}")
    policy = load_policy(path)
    if policy.n != spec.n:
        raise CommandError(f"policy expects n={policy.n}, {spec.name} has n={spec.n}")
    return policy


def _load_models(path):
    """Source model, target model (or None) and fault estimate (or None) from a JSON file."""
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"model file not found: {path}")
    data = json.loads(path.read_text())

    def dyn(d):
        return LinearDynamics(np.array(d["A"], float), np.array(d["B"], float), float(d["dt"]))

    if "source" in data:
        return dyn(data["source"]), dyn(data["target"]) if "target" in data else None
    return dyn(data), None


def _curve_csv(curve: LearningCurve, seed: int, variant: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {CURVE_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    w.writerows(curve_rows(seed, variant, curve.to_dict()))
    return buf.getvalue()


def preset_path(preset: str, system: str):
    return resources.files("faultxfer") / "presets" / preset / f"{system}.yaml"


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, art: Artifacts):
    cfg = load_config(args)
    problem = build_problem(cfg)
    spec = problem.target if args.plant == "target" else problem.source
    reward = problem.reward_target if args.plant == "target" else problem.reward_source
    policy = _policy_for(args.policy, cfg, problem, args.plant)
    horizon = args.horizon or cfg.system.horizon
    x0 = _parse_vector(args.x0, spec.n, "--x0")
    buf = collect_buffer(spec, policy, args.episodes, horizon, args.noise, cfg.seeds[0],
                         reward_fn=reward, cap=None, tag="s" if args.plant == "source" else "t", x0=x0)
    art.add("trajectory.csv", buf.to_csv())
    returns = buf.episode_returns()
    print(f"{spec.name} ({args.plant}): {buf.n_episodes} episodes, {len(buf)} transitions, "
          f"mean return {returns.mean():.6g}")
    return cfg


def cmd_identify(args, art: Artifacts):
    paths = [Path(args.buffer)] + ([Path(args.target)] if args.target else [])
    for p in paths:
        if not p.is_file():
            raise CommandError(f"buffer file not found: {p}")
    rep_s = fit_linear(TrajectoryBuffer.from_csv(paths[0]))
    out = {"source": rep_s.to_dict()}
    if args.target:
        rep_t = fit_linear(TrajectoryBuffer.from_csv(paths[1]))
        est = estimate_transforms(rep_s.dynamics, rep_t.dynamics)
        out["target"] = rep_t.to_dict()
        out["F_A"] = est.F_A.tolist()
        out["F_B"] = est.F_B.tolist()
    text = json.dumps(out, indent=1, sort_keys=True) + "\n"
    art.add("identification.json", text)
    for key in ("source", "target"):
        if key in out:
            r = out[key]
            print(f"{key}: A={np.round(r['A'], 6).tolist()} B={np.round(r['B'], 6).tolist()} "
                  f"residual={r['residual']:.3g} samples={r['sample_count']} rank={r['rank']}"
                  + (f" warnings={r['warnings']}" if r["warnings"] else ""))
    if "F_A" in out:
        print(f"F_A={np.round(out['F_A'], 6).tolist()} F_B={np.round(out['F_B'], 6).tolist()}")
    return None


def cmd_transfer(args, art: Artifacts):
    cfg = load_config(args)
    problem = build_problem(cfg)
    pi_s = _policy_for(args.policy, cfg, problem, "source")
    if args.models:
        src, tgt = _load_models(args.models)
        if tgt is None:
            raise CommandError("--models needs both source and target models (identify BUFFER --target BUFFER)")
        est = estimate_transforms(src, tgt)
        A_s, B_s, F_A, F_B = src.A, src.B, est.F_A, est.F_B
    else:
        lin = linearize(problem.source)
        A_s, B_s, F_A, F_B = lin.A, lin.B, problem.target.fault.F_A, problem.target.fault.F_B
    pi_t = transform_policy(pi_s, A_s, B_s, F_A, F_B)
    art.add_json("pi_t.json", policy_to_dict(pi_t))
    print(f"M={np.round(pi_t.M, 6).tolist()} K_add={np.round(pi_t.K_add, 6).tolist()} "
          f"rho={pi_t.rho:.3g} drift_mismatch={pi_t.drift_mismatch:.3g}")
    return cfg


def cmd_train(args, art: Artifacts):
    from .harness import _train_config

    cfg = load_config(args, family="rl")
    problem = build_problem(cfg)
    spec = problem.target if args.plant == "target" else problem.source
    reward = problem.reward_target if args.plant == "target" else problem.reward_source
    seed = cfg.seeds[0]
    if args.init:
        policy = _policy_for(args.init, cfg, problem, args.plant)
    else:
        policy = ParametricPolicy(spec.n, spec.m, cfg.training.hidden, rng=np.random.default_rng(_seed(seed, 1)))
    iterations = args.iterations or cfg.training.source_iterations
    tc = _train_config(cfg, iterations, _seed(seed, 2), args.trainable_set, _seed(seed, 0))

    def checkpoint(it, pol, curve):
        if args.checkpoint_every and (it + 1) % args.checkpoint_every == 0:
            art.add_json(f"checkpoints/iter_{it + 1:05d}.json", policy_to_dict(pol))

    try:
        policy, curve = train(policy, spec, reward, tc, callback=checkpoint)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    art.add_json("policy.json", policy_to_dict(policy))
    art.add("curve.csv", _curve_csv(curve, seed, "train"))
    mean, std = evaluate_policy(policy, spec, reward, cfg.evaluation.episodes, _seed(seed, 0), cfg.system.horizon)
    print(f"trained {iterations} iterations ({curve.environment_steps[-1]} steps); "
          f"deterministic return {mean:.6g} +/- {std:.3g}")
    return cfg


def cmd_evaluate(args, art: Artifacts):
    cfg = load_config(args)
    problem = build_problem(cfg)
    spec = problem.target if args.plant == "target" else problem.source
    reward = problem.reward_target if args.plant == "target" else problem.reward_source
    policy = _policy_for(args.policy, cfg, problem, args.plant)
    x0 = _parse_vector(args.x0, spec.n, "--x0")
    episodes = args.episodes or cfg.evaluation.episodes
    mean, std = evaluate_policy(policy, spec, reward, episodes, _seed(cfg.seeds[0], 0), cfg.system.horizon, x0)
    result = {"system": spec.name, "plant": args.plant, "episodes": episodes, "mean": mean, "std": std}
    art.add_json("evaluation.json", result)
    print(f"mean {mean} +/- {std} over {episodes} episodes")
    return cfg


def cmd_reproduce(args, art: Artifacts):
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    cfgs = []
    if args.config:
        # a config names its own system; the preset only labels the outputs
        cfg = parse_config(args.config)
        if args.system and cfg.system.name != args.system:
            raise CommandError(f"--config is for {cfg.system.name}, --system says {args.system}")
        cfgs.append(cfg)
    else:
        for system in [args.system] if args.system else list(SYSTEMS):
            path = preset_path(args.preset, system)
            if not path.is_file():
                raise CommandError(f"no shipped preset {args.preset} for {system}")
            cfgs.append(config_from_dict(yaml.safe_load(path.read_text())))
    if args.seed:
        for cfg in cfgs:
            cfg.seeds = _parse_seeds(args.seed)
    for cfg in cfgs:
        name = cfg.system.name
        report: TransferReport = run_transfer_experiment(cfg)
        if report.failures:
            f = report.failures[0]
            raise CommandError(f"{name} seed {f['seed']} failed at {f['stage']}: {f['error']}")
        stem = f"{args.preset}_{name}"
        art.add(f"{stem}.json", report.to_json())
        if args.preset == "learning-curves":
            art.add(f"{stem}_curves.csv", report.to_curves_csv())
        else:
            art.add(f"{stem}.csv", report.to_table_csv())
        print(report.to_text(), end="")
    return cfgs


def cmd_show_config(args, art: Artifacts):
    if args.config:
        cfg = parse_config(args.config)
    elif args.preset:
        path = preset_path(args.preset, args.system or "temperature")
        if not path.is_file():
            raise CommandError(f"no shipped preset {args.preset}")
        cfg = config_from_dict(yaml.safe_load(path.read_text()))
    else:
        cfg = default_config(args.system or "temperature", args.family)
    sys.stdout.write(emit_config(cfg))
    return None


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faultxfer", description="Model-based policy transfer across parametric faults.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--system", choices=SYSTEMS)
        p.add_argument("--seed", help="comma-separated seeds (the first is used by single-run commands)")
        if out:
            p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")

    def plant(p):
        p.add_argument("--plant", choices=["source", "target"], default="source",
                       help="nominal plant or the faulted one from the config")

    p = sub.add_parser("simulate", help="roll a policy and dump a trajectory CSV")
    common(p)
    plant(p)
    p.add_argument("--policy", default="lqr", help="policy JSON, or zero / lqr / mpc")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--horizon", type=int)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian action-noise std")
    p.add_argument("--x0", help="fixed initial state, comma-separated")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("identify", help="fit linear models from trajectory CSVs")
    p.add_argument("buffer", help="source (or only) trajectory CSV")
    p.add_argument("--target", help="target trajectory CSV; also estimates F_A, F_B")
    p.add_argument("--out")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("transfer", help="build the transformed policy pi_t")
    common(p)
    p.add_argument("--policy", default="lqr", help="source policy JSON, or zero / lqr / mpc")
    p.add_argument("--models", help="identification JSON with source and target models; default: the config's known fault")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("train", help="train a policy with the clipped-surrogate learner")
    common(p)
    plant(p)
    p.add_argument("--init", help="initial policy JSON (default: fresh network)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--trainable-set", default="all", choices=["all", "source_params_only", "source_plus_transform"])
    p.add_argument("--checkpoint-every", type=int, default=10, help="0 disables checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="mean and std of a policy's episodic reward")
    common(p)
    plant(p)
    p.add_argument("--policy", required=True, help="policy JSON, or zero / lqr / mpc")
    p.add_argument("--episodes", type=int)
    p.add_argument("--x0", help="fixed initial state, comma-separated")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce", help="run a named preset and emit table/curve data")
    p.add_argument("preset", nargs="?", help=", ".join(PRESETS))
    p.add_argument("--preset", dest="preset_flag", help="same as the positional argument")
    common(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("show-config", help="print a fully defaulted config")
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--system", choices=SYSTEMS)
    p.add_argument("--family", default="lqr", choices=["lqr", "mpc", "rl"])
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "reproduce":
        if args.preset and args.preset_flag and args.preset != args.preset_flag:
            parser.error("conflicting preset names")
        args.preset = args.preset or args.preset_flag
        if not args.preset:
            parser.error("reproduce needs a preset name")
    out = Path(getattr(args, "out", None) or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    art = Artifacts(out)
    try:
        cfg = args.func(args, art)
        if art.files:
            cfgs = [] if cfg is None else cfg if isinstance(cfg, list) else [cfg]
            seeds = sorted({s for c in cfgs for s in c.seeds})
            digest = None
            if cfgs:
                digest = cfgs[0].digest() if len(cfgs) == 1 else hashlib.sha256(
                    "".join(c.digest() for c in cfgs).encode()).hexdigest()[:16]
            for path in art.commit(digest, seeds, args.command):
                log.info("wrote %s", path)
    except (CommandError, ConfigError, ValueError, ArithmeticError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"faultxfer {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

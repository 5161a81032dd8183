"""Experiment configuration: YAML parsing with strict keys and documented defaults."""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .dynamics import DEFAULT_DT, DEFAULT_HORIZON, DEFAULT_PARAMS, DIMENSIONS
from .episodes import ACTION_WEIGHT, STATE_WEIGHTS

FAMILIES = ("lqr", "mpc", "rl")
VARIANTS = ("pi_s", "pi_s_star", "pi_t", "pi_t_minus", "pi_t_plus", "pi_direct")
DEFAULT_VARIANTS = {
    "lqr": ["pi_s", "pi_direct", "pi_t"],
    "mpc": ["pi_s", "pi_direct", "pi_t"],
    "rl": ["pi_s", "pi_s_star", "pi_t", "pi_t_minus", "pi_t_plus"],
}
# training iterations treated as "converged" for the source policy
SOURCE_ITERATIONS = {"temperature": 50, "spring": 150, "pendulum": 150, "cartpole": 300}

Number = Union[int, float]


class ConfigError(ValueError):
    pass


@dataclass
class SystemSection:
    name: str = "temperature"
    params: dict = field(default_factory=dict)
    dt: float = DEFAULT_DT
    horizon: int = DEFAULT_HORIZON
    stable_friction: bool = False


@dataclass
class FaultSection:
    # "known" uses F_A/F_B directly; "identify" estimates them from data
    mode: str = "known"
    # a scalar s means s * I
    F_A: Any = 1.5
    F_B: Any = -1.0


@dataclass
class CostSection:
    Q: Optional[list] = None
    R: list = field(default_factory=lambda: [ACTION_WEIGHT])
    setpoint: Optional[list] = None
    # evaluation/RL reward: "quadratic" or "bonus"
    reward: Optional[str] = None


@dataclass
class ControllerSection:
    family: str = "lqr"
    mpc_horizon: int = 5
    variants: Optional[list] = None


@dataclass
class BudgetSection:
    episodes: int = 5
    max_interactions: int = 2500
    exploration_noise: float = 0.1


@dataclass
class EvaluationSection:
    episodes: int = 20
    threshold: Optional[float] = None


@dataclass
class TrainingSection:
    gamma: float = 0.99
    steps_per_iteration: int = 2000
    source_iterations: Optional[int] = None
    finetune_iterations: int = 100
    clip_ratio: float = 0.2
    learning_rate: float = 3e-4
    minibatch_size: int = 250
    epochs: int = 10
    entropy_coefficient: float = 0.0
    max_grad_norm: float = 0.5
    hidden: int = 32
    # deterministic evaluation episodes recorded per curve point (0 disables)
    eval_episodes: int = 20


@dataclass
class ExperimentConfig:
    system: SystemSection = field(default_factory=SystemSection)
    fault: FaultSection = field(default_factory=FaultSection)
    cost: CostSection = field(default_factory=CostSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    budget: BudgetSection = field(default_factory=BudgetSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash that ignores key order."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# shorthand: `system: spring` means `system: {name: spring}`
_SHORTHAND = {"system": "name", "controller": "family"}


def _suggest(key: str, allowed) -> str:
    close = difflib.get_close_matches(key, list(allowed), n=1, cutoff=0.5)
    return f"; did you mean {close[0]!r}?" if close else ""


def _check_type(where: str, value, expected):
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "bool": lambda v: isinstance(v, bool),
        "list": lambda v: isinstance(v, list),
        "dict": lambda v: isinstance(v, dict),
    }
    kinds = [k.strip() for k in expected.replace("Optional[", "").replace("]", "").split("|")]
    if value is None and "Optional[" in expected:
        return value
    for kind in kinds:
        if kind in ok and ok[kind](value):
            return float(value) if kind == "float" else value
        if kind == "Any":
            return value
    raise ConfigError(f"{where}: expected {expected}, got {type(value).__name__} ({value!r})")


_TYPES = {
    int: "int", float: "float", str: "str", bool: "bool", dict: "dict", list: "list",
    Optional[int]: "Optional[int]", Optional[float]: "Optional[float]", Optional[list]: "Optional[list]",
    Optional[str]: "Optional[str]", Any: "Any",
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in data if k not in fields]
    if unknown:
        key = unknown[0]
        raise ConfigError(f"unknown key {where + '.' if where else ''}{key}{_suggest(key, fields)}")
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        label = f"{where}.{name}" if where else name
        sub = _SECTIONS.get(name) if cls is ExperimentConfig else None
        if sub is not None:
            if name in _SHORTHAND and isinstance(value, str):
                value = {_SHORTHAND[name]: value}
            kwargs[name] = _build(sub, value if value is not None else {}, label)
        else:
            kwargs[name] = _check_type(label, value, _hint_name(hint))
    return cls(**kwargs)


def _hint_name(hint) -> str:
    if isinstance(hint, str):
        return hint
    return _TYPES.get(hint, "Any")


_SECTIONS = {
    "system": SystemSection,
    "fault": FaultSection,
    "cost": CostSection,
    "controller": ControllerSection,
    "budget": BudgetSection,
    "evaluation": EvaluationSection,
    "training": TrainingSection,
}


def _square(value, n: int, label: str) -> list:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return value
    try:
        rows = [[float(v) for v in row] for row in value]
    except TypeError as exc:
        raise ConfigError(f"{label}: expected a scalar or an {n}x{n} matrix") from exc
    if len(rows) != n or any(len(r) != n for r in rows):
        raise ConfigError(f"{label}: expected an {n}x{n} matrix")
    return rows


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Validate ranges and fill per-system defaults in place."""
    s = cfg.system
    if s.name not in DEFAULT_PARAMS:
        raise ConfigError(f"system.name: unknown system {s.name!r}{_suggest(s.name, DEFAULT_PARAMS)}")
    n, m = DIMENSIONS[s.name]
    for key in s.params:
        if key not in DEFAULT_PARAMS[s.name]:
            raise ConfigError(f"unknown key system.params.{key}{_suggest(key, DEFAULT_PARAMS[s.name])}")
    s.params = {k: float(v) for k, v in s.params.items()}
    if s.dt <= 0:
        raise ConfigError("system.dt must be > 0")
    if s.horizon < 1:
        raise ConfigError("system.horizon must be >= 1")

    if cfg.fault.mode not in ("known", "identify"):
        raise ConfigError(f"fault.mode must be 'known' or 'identify', got {cfg.fault.mode!r}")
    cfg.fault.F_A = _square(cfg.fault.F_A, n, "fault.F_A")
    cfg.fault.F_B = _square(cfg.fault.F_B, n, "fault.F_B")

    c = cfg.cost
    if c.Q is None:
        c.Q = list(STATE_WEIGHTS[s.name])
    c.Q = [float(v) for v in c.Q]
    c.R = [float(v) for v in c.R]
    if len(c.Q) != n or len(c.R) != m:
        raise ConfigError(f"cost.Q needs {n} diagonal entries and cost.R needs {m}")
    if any(q < 0 for q in c.Q) or any(r <= 0 for r in c.R):
        raise ConfigError("cost.Q entries must be >= 0 and cost.R entries > 0")
    if c.setpoint is None:
        c.setpoint = [0.0] * n
    c.setpoint = [float(v) for v in c.setpoint]
    if len(c.setpoint) != n:
        raise ConfigError(f"cost.setpoint needs {n} entries")
    if c.reward is None:
        c.reward = "bonus" if s.name == "cartpole" else "quadratic"
    if c.reward not in ("quadratic", "bonus"):
        raise ConfigError(f"cost.reward must be 'quadratic' or 'bonus', got {c.reward!r}")

    ctl = cfg.controller
    if ctl.family not in FAMILIES:
        raise ConfigError(f"controller.family must be one of {FAMILIES}{_suggest(ctl.family, FAMILIES)}")
    if ctl.mpc_horizon < 1:
        raise ConfigError("controller.mpc_horizon must be >= 1")
    if ctl.variants is None:
        ctl.variants = list(DEFAULT_VARIANTS[ctl.family])
    for v in ctl.variants:
        if v not in VARIANTS:
            raise ConfigError(f"controller.variants: unknown variant {v!r}{_suggest(str(v), VARIANTS)}")
        if ctl.family != "rl" and v in ("pi_s_star", "pi_t_minus", "pi_t_plus"):
            raise ConfigError(f"variant {v} needs controller.family: rl")

    b = cfg.budget
    if b.episodes < 0 or b.max_interactions < 0 or b.exploration_noise < 0:
        raise ConfigError("budget values must be >= 0")
    if cfg.fault.mode == "identify" and b.episodes < 1:
        raise ConfigError("budget.episodes must be >= 1 when fault.mode is 'identify'")

    if cfg.evaluation.episodes < 1:
        raise ConfigError("evaluation.episodes must be >= 1")

    t = cfg.training
    if not 0 < t.gamma <= 1:
        raise ConfigError(f"training.gamma must lie in (0, 1], got {t.gamma}")
    if not 0 < t.clip_ratio < 1:
        raise ConfigError(f"training.clip_ratio must lie in (0, 1), got {t.clip_ratio}")
    if t.learning_rate < 0:
        raise ConfigError("training.learning_rate must be >= 0")
    if t.source_iterations is None:
        t.source_iterations = SOURCE_ITERATIONS[s.name]
    for name in ("steps_per_iteration", "minibatch_size", "epochs", "hidden"):
        if getattr(t, name) < 1:
            raise ConfigError(f"training.{name} must be >= 1")
    if t.eval_episodes < 0:
        raise ConfigError("training.eval_episodes must be >= 0")

    if not cfg.seeds or not all(isinstance(x, int) and not isinstance(x, bool) for x in cfg.seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    return cfg


def config_from_dict(data: Optional[dict]) -> ExperimentConfig:
    return resolve(_build(ExperimentConfig, data or {}, ""))


def parse_config(path) -> ExperimentConfig:
    """Load a YAML experiment config, applying defaults and rejecting unknown keys."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(data)


def emit_config(cfg: ExperimentConfig) -> str:
    """Canonical YAML text; ``emit(parse(emit(c))) == emit(c)``."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None, width=100)


def default_config(system: str = "temperature", family: str = "lqr", **overrides) -> ExperimentConfig:
    data = {"system": {"name": system}, "controller": {"family": family}}
    for section, values in overrides.items():
        if isinstance(values, dict):
            data.setdefault(section, {}).update(values)
        else:
            data[section] = values
    return config_from_dict(data)


PRESETS = {
    "lqr-table": {"controller": {"family": "lqr"}, "fault": {"mode": "known"}},
    "mpc-table": {"controller": {"family": "mpc"}, "fault": {"mode": "known"}},
    "rl-known-table": {"controller": {"family": "rl"}, "fault": {"mode": "known"}},
    "rl-identified-table": {"controller": {"family": "rl"}, "fault": {"mode": "identify"}},
    "learning-curves": {"controller": {"family": "rl"}, "fault": {"mode": "identify"}},
}


def preset_config(preset: str, system: str) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}{_suggest(preset, PRESETS)}")
    data = json.loads(json.dumps(PRESETS[preset]))
    data["system"] = {"name": system}
    return config_from_dict(data)

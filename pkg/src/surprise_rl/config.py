"""Run configuration: INI-style sections with scalar values.

Every key has a default; unknown sections or keys are rejected, and all
problems found in a file are reported together.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

from .bonus import SCHEMES
from .envs import ENV_REGISTRY


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class RunSection:
    env: str = "sparse-mountaincar"
    iterations: int = 150
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class BonusSection:
    scheme: str = "surprisal"
    k: int = 1
    eta0: float = 1e-3
    # "auto": on only for environments where the agent can die
    nonnegative_shift: str = "auto"


@dataclass
class PolicySection:
    hidden_sizes: Tuple[int, ...] = (32,)
    init_log_std: float = 0.0


@dataclass
class ValueSection:
    kind: str = "nn"
    hidden_sizes: Tuple[int, ...] = (32,)
    delta: float = 0.01


@dataclass
class TrpoSection:
    delta_kl: float = 0.01
    batch_size: int = 5000
    max_len: int = 500
    gamma: float = 0.995
    gae_lambda: float = 0.95
    cg_iters: int = 10
    damping: float = 1e-5
    backtrack_ratio: float = 0.8
    max_backtracks: int = 15
    subsample_fraction: float = 1.0
    strict_appendix_a: bool = False
    standardize_advantages: bool = True


@dataclass
class DynamicsSection:
    hidden_sizes: Tuple[int, ...] = (32,)
    kappa: float = 1e-3
    alpha: float = 1.0
    batch_size: int = 5000
    replay_capacity: int = 200_000
    updates_per_iter: int = 1
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    subsample_fraction: float = 1.0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    bonus: BonusSection = field(default_factory=BonusSection)
    policy: PolicySection = field(default_factory=PolicySection)
    value: ValueSection = field(default_factory=ValueSection)
    trpo: TrpoSection = field(default_factory=TrpoSection)
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)

    def replace(self, **sections: Dict[str, Any]) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(run={"seed": 3})``."""
        kwargs = {}
        for f in dataclasses.fields(self):
            current = getattr(self, f.name)
            kwargs[f.name] = dataclasses.replace(current, **sections.get(f.name, {}))
        cfg = RunConfig(**kwargs)
        validate(cfg)
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"[{f.name}]")
            for k, v in dataclasses.asdict(getattr(self, f.name)).items():
                if isinstance(v, (tuple, list)):
                    v = ",".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = str(v).lower()
                lines.append(f"{_key_alias(k)} = {v}")
            lines.append("")
        return "\n".join(lines)


# "lambda" is the documented key; it is a Python keyword
_ALIASES = {"lambda": "gae_lambda"}


def _key_alias(attr):
    return {v: k for k, v in _ALIASES.items()}.get(attr, attr)


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw.strip("\"'")
    # hidden layer sizes
    raw = raw.strip("()[] ")
    return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)


def _field_types(section_cls):
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: hints.get(f.type, tuple) for f in dataclasses.fields(section_cls)}


def validate(cfg: RunConfig):
    problems = []

    def check(ok, msg):
        if not ok:
            problems.append(msg)

    check(cfg.run.env in ENV_REGISTRY, f"run.env: unknown environment {cfg.run.env!r}")
    check(cfg.run.iterations >= 1, "run.iterations: must be >= 1")
    check(cfg.run.seed >= 0, "run.seed: must be >= 0")
    check(cfg.run.checkpoint_every >= 0, "run.checkpoint_every: must be >= 0")
    check(cfg.bonus.scheme in SCHEMES, f"bonus.scheme: unknown scheme {cfg.bonus.scheme!r}")
    check(cfg.bonus.k >= 1, "bonus.k: must be >= 1")
    check(cfg.bonus.eta0 > 0, "bonus.eta0: must be positive")
    check(cfg.bonus.nonnegative_shift in ("auto", "true", "false"),
          "bonus.nonnegative_shift: expected auto, true or false")
    check(all(h >= 1 for h in cfg.policy.hidden_sizes), "policy.hidden_sizes: sizes must be >= 1")
    check(cfg.value.kind in ("nn", "linear"), "value.kind: expected nn or linear")
    check(cfg.value.delta > 0, "value.delta: must be positive")
    t = cfg.trpo
    check(t.delta_kl > 0, "trpo.delta_kl: must be positive")
    check(t.batch_size >= 1, "trpo.batch_size: must be >= 1")
    check(t.max_len >= 1, "trpo.max_len: must be >= 1")
    check(0 < t.gamma <= 1, "trpo.gamma: must lie in (0, 1]")
    check(0 <= t.gae_lambda <= 1, "trpo.lambda: must lie in [0, 1]")
    check(t.cg_iters >= 1, "trpo.cg_iters: must be >= 1")
    check(t.damping >= 0, "trpo.damping: must be >= 0")
    check(0 < t.backtrack_ratio < 1, "trpo.backtrack_ratio: must lie in (0, 1)")
    check(t.max_backtracks >= 0, "trpo.max_backtracks: must be >= 0")
    check(0 < t.subsample_fraction <= 1, "trpo.subsample_fraction: must lie in (0, 1]")
    d = cfg.dynamics
    check(d.kappa >= 0, "dynamics.kappa: must be >= 0")
    check(d.alpha >= 0, "dynamics.alpha: must be >= 0")
    check(d.batch_size >= 1, "dynamics.batch_size: must be >= 1")
    check(d.replay_capacity >= 1, "dynamics.replay_capacity: must be >= 1")
    check(d.updates_per_iter >= 0, "dynamics.updates_per_iter: must be >= 0")
    check(d.log_std_min < d.log_std_max, "dynamics.log_std_min: must be below log_std_max")
    check(0 < d.subsample_fraction <= 1, "dynamics.subsample_fraction: must lie in (0, 1]")
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config(text: str) -> RunConfig:
    """Parse INI text into a validated :class:`RunConfig`."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc

    problems = []
    classes = {
        "run": RunSection, "bonus": BonusSection, "policy": PolicySection,
        "value": ValueSection, "trpo": TrpoSection, "dynamics": DynamicsSection,
    }
    values: Dict[str, Dict[str, Any]] = {name: {} for name in classes}
    for section in parser.sections():
        if section not in classes:
            problems.append(f"{section}: unknown section")
            continue
        types = _field_types(classes[section])
        for key, raw in parser.items(section):
            attr = _ALIASES.get(key, key)
            if attr not in types:
                problems.append(f"{section}.{key}: unknown key")
                continue
            try:
                values[section][attr] = _parse_value(raw, types[attr])
            except ValueError as exc:
                problems.append(f"{section}.{key}: {exc}")
    cfg = RunConfig(**{name: classes[name](**vals) for name, vals in values.items()})
    try:
        validate(cfg)
    except ConfigError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())

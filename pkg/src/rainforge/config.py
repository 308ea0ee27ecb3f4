"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Command-line flags override file
values; a key given twice in one file keeps its last value and leaves a
warning on the resulting config.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attack import UPDATE_RULES, AttackConfig
from .augment import AugmentConfig
from .errors import ConfigError, InvalidArgumentError
from .rain import Bounds

log = logging.getLogger(__name__)

COMMANDS = ("generate", "attack", "augment", "train-victim", "evaluate")
KINDS = ("classification", "detection", "rain")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _bool(text):
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _optional_float(text):
    if text in (None, "", "auto"):
        return None
    return float(text)


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


@dataclass
class RunConfig:
    command: str = ""
    input: str = ""  # manifest
    test_input: str = ""  # optional held-out manifest for train-victim
    out: str = ""
    model: str = ""
    seed: int = 0
    workers: int = 1
    kind: str = "classification"  # generate / train-victim: what to build
    n_train: int = 3000
    n_test: int = 1000
    size: int = 32
    epsilon_n: float = 0.005
    epsilon_theta: float = 0.2
    epsilon_k: float = 0.3
    steps: int = 8
    interval_low: float = 0.7
    interval_high: float = 1.0
    iterations: int = 20
    alpha_noise: float = 0.02
    alpha_theta: float = 0.01
    alpha_kernel: float = 0.02
    update_rule: str = "momentum"
    momentum: float = 0.9
    sign_image_grad: bool = True
    sequential: bool = True
    baseline: bool = True  # attack: also write the normal-rain control image
    k: int = 3
    dirichlet_alpha: float = 1.0
    base_choice_prob: float = 0.5
    multiplier: int = 1
    augment_iterations: int = 5
    epochs: int = 20
    lr: float | None = None  # None: per-model default
    batch_size: int = 64
    version: str = ""
    warnings: list = field(default_factory=list, repr=False, compare=False)

    def bounds(self):
        return Bounds(self.epsilon_n, self.epsilon_theta, self.epsilon_k)

    def attack_config(self, mode="classification", iterations=None):
        return AttackConfig(
            iterations=iterations or self.iterations, alpha_noise=self.alpha_noise,
            alpha_theta=self.alpha_theta, alpha_kernel=self.alpha_kernel,
            update_rule=self.update_rule, momentum=self.momentum, mode=mode,
            bounds=self.bounds(), steps=self.steps, interval=(self.interval_low, self.interval_high),
            sign_image_grad=self.sign_image_grad, sequential=self.sequential, seed=self.seed,
        )

    def augment_config(self, mode="classification"):
        return AugmentConfig(
            k=self.k, dirichlet_alpha=self.dirichlet_alpha, base_choice_prob=self.base_choice_prob,
            attack=self.attack_config(mode, self.augment_iterations), seed=self.seed,
            multiplier=self.multiplier,
        )

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "warnings"]


_PARSERS = {
    "command": _choice(COMMANDS),
    "kind": _choice(KINDS),
    "update_rule": _choice(UPDATE_RULES),
}
KEYS = [f.name for f in fields(RunConfig) if f.name != "warnings"]
_TYPES = {f.name: f.type for f in fields(RunConfig)}

REQUIRED = {
    "generate": ("out",),
    "attack": ("input", "model", "out"),
    "augment": ("input", "model", "out"),
    "train-victim": ("out",),
    "evaluate": ("input", "model", "out"),
}


def parse_value(key, text):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    parser = _PARSERS.get(key) or {"int": int, "float": float, "bool": _bool, "str": str,
                                   "float | None": _optional_float}[_TYPES[key]]
    try:
        return parser(text.strip() if isinstance(text, str) else text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from exc


def parse_config_text(text, source="<config>"):
    """``(values, warnings)`` from flat config text."""
    values, warnings = {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES or key == "warnings":
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            warnings.append(f"{source}:{lineno}: duplicate key {key!r}; last value wins")
        values[key] = parse_value(key, value)
    return values, warnings


def load_config(path=None, overrides=None, command=None):
    """Merge an optional config file with ``overrides`` (flags win) into a RunConfig."""
    values, warnings = {}, []
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
        values, warnings = parse_config_text(text, str(p))
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        if value is None:
            continue
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    if command is not None:
        if values.get("command", command) != command:
            raise ConfigError(f"config is for command {values['command']!r}, not {command!r}")
        values["command"] = command
    cfg = RunConfig(**values)
    cfg.warnings = warnings
    for w in warnings:
        log.warning(w)
    if cfg.command:
        missing = [k for k in REQUIRED[cfg.command] if not getattr(cfg, k)]
        if missing:
            raise ConfigError(f"missing required key(s) for {cfg.command}: {', '.join(missing)}")
    try:
        cfg.bounds()
        cfg.attack_config()
        cfg.augment_config()
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def format_config(cfg):
    def fmt(v):
        if isinstance(v, bool):
            return str(v).lower()
        return "auto" if v is None else v

    lines = [f"{k} = {fmt(v)}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"

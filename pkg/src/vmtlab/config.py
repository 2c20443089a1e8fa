"""Experiment configuration: dataclasses plus a flat, sectioned key=value format.

Unknown keys are errors. ``parse(serialize(cfg)) == cfg`` holds for every
valid configuration.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .data import TaskSpec
from .losses import LossConfig, LossTermMask
from .nn import ADAM_DEFAULTS, EMA_MOMENTUM


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    depth: int = 2


@dataclass(frozen=True)
class OptimConfig:
    lr: float = ADAM_DEFAULTS["lr"]
    beta1: float = ADAM_DEFAULTS["beta1"]
    beta2: float = ADAM_DEFAULTS["beta2"]
    eps: float = ADAM_DEFAULTS["eps"]
    ema_momentum: float = EMA_MOMENTUM


@dataclass(frozen=True)
class MaskConfig:
    terms: str = "Lc,Lv,Lm"
    site: str = "logits"

    def mask(self) -> LossTermMask:
        return LossTermMask.parse(self.terms, self.site)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 64
    eval_interval: int = 1000
    disc_steps: int = 1  # discriminator updates per encoder/head update
    seed: int = 0
    check_groups: bool = False  # assert per-step group isolation (debug)


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 1000
    interval: int = 500  # teacher refresh period
    eval_interval: int = 500


@dataclass(frozen=True)
class EvalConfig:
    probe_pairs: int = 200
    probe_lambdas: int = 11
    probe_output: str = "predicted"  # or "jacobian"


@dataclass(frozen=True)
class ExperimentConfig:
    data: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        try:
            self.data.validate()
            self.loss.validate()
            self.mask.mask()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        checks = [
            (self.model.hidden >= 1, "model.hidden must be >= 1"),
            (self.model.depth >= 1, "model.depth must be >= 1"),
            (self.optim.lr > 0, "optim.lr must be > 0"),
            (0 <= self.optim.beta1 < 1, "optim.beta1 must lie in [0, 1)"),
            (0 <= self.optim.beta2 < 1, "optim.beta2 must lie in [0, 1)"),
            (self.optim.eps > 0, "optim.eps must be > 0"),
            (0 <= self.optim.ema_momentum < 1, "optim.ema_momentum must lie in [0, 1)"),
            (self.train.iterations >= 0, "train.iterations must be >= 0"),
            (self.train.batch_size >= 2, "train.batch_size must be >= 2"),
            (self.train.eval_interval >= 1, "train.eval_interval must be >= 1"),
            (self.train.disc_steps >= 0, "train.disc_steps must be >= 0"),
            (self.refine.iterations >= 0, "refine.iterations must be >= 0"),
            (self.refine.interval >= 1, "refine.interval must be >= 1"),
            (self.refine.eval_interval >= 1, "refine.eval_interval must be >= 1"),
            (self.eval.probe_pairs >= 1, "eval.probe_pairs must be >= 1"),
            (self.eval.probe_lambdas >= 2, "eval.probe_lambdas must be >= 2"),
            (self.eval.probe_output in ("predicted", "jacobian"), "eval.probe_output must be predicted or jacobian"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=int(seed)))

    def with_mask(self, mask: LossTermMask) -> "ExperimentConfig":
        return replace(self, mask=MaskConfig(mask.terms, mask.mixup_site))

    def update(self, section: str, **kw) -> "ExperimentConfig":
        return replace(self, **{section: replace(getattr(self, section), **kw)})

    def hash(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()[:16]


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _coerce(raw: str, default: Any, ftype: str, key: str) -> Any:
    raw = raw.strip()
    try:
        if "bool" in str(ftype) or isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if raw.lower() == "none" and "None" in str(ftype):
            return None
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        if isinstance(default, float) or "float" in str(ftype):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def serialize(cfg: ExperimentConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown_sections = [s for s in cp.sections() if s not in SECTIONS]
    if unknown_sections:
        raise ConfigError(f"unknown section(s) {unknown_sections}; accepted: {list(SECTIONS)}")
    default = ExperimentConfig()
    parts = {}
    for section in SECTIONS:
        proto = getattr(default, section)
        known = {f.name: f for f in fields(proto)}
        values = {}
        if cp.has_section(section):
            for key, raw in cp.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}; accepted: {sorted(known)}")
                values[key] = _coerce(raw, getattr(proto, key), known[key].type, f"{section}.{key}")
        parts[section] = replace(proto, **values)
    return ExperimentConfig(**parts).validate()


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse(text)


def save(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize(cfg))


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)

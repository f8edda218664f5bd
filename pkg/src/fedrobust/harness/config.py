"""Experiment configuration.

Configs are INI files with one section per module. Every key is optional and
falls back to the standard desk-scale task; unknown sections or keys are
rejected so a typo never silently changes an experiment.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from fedrobust.aggregators import AggregatorSpec
from fedrobust.attacks import KINDS as ATTACK_KINDS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_examples: int = 10_000
    n_features: int = 20
    n_classes: int = 10
    separation: float = 4.0
    test_fraction: float = 0.2


@dataclass(frozen=True)
class PartitionSection:
    n_clients: int = 20
    bias: float = 0.5


@dataclass(frozen=True)
class ModelSection:
    kind: str = "logistic"
    hidden_width: int = 0
    l2_reg: float = 1e-3


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.1


@dataclass(frozen=True)
class AggregatorSection:
    rule: str = "fedavg"
    trim_c: int = 4
    synthetic_m: int = 10
    assumed_f: int = 4
    estimate_f: bool = False


@dataclass(frozen=True)
class AttackSection:
    kind: str = "none"
    n_malicious: int = 4
    gaussian_variance: float = 200.0
    trim_lo: float = 3.0
    trim_hi: float = 4.0
    perturbation: str = "unit_vec"
    scale_factor: float = 0.0  # 0 means n / f
    mpaf_magnitude: float = 100.0
    adaptive_z: float = 0.0  # 0 means the supporter-count default
    trigger_indices: str = "0,1,2"
    trigger_value: float = 8.0
    target_label: int = 0


@dataclass(frozen=True)
class ExperimentSection:
    rounds: int = 200
    global_lr: float = 1.0
    participation_fraction: float = 1.0
    eval_every: int = 10
    seed: int = 0


SECTIONS = {
    "data": DataConfig,
    "partition": PartitionSection,
    "model": ModelSection,
    "train": TrainSection,
    "aggregator": AggregatorSection,
    "attack": AttackSection,
    "experiment": ExperimentSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionSection = field(default_factory=PartitionSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    aggregator: AggregatorSection = field(default_factory=AggregatorSection)
    attack: AttackSection = field(default_factory=AttackSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        e, p, a = self.experiment, self.partition, self.attack
        if e.rounds < 1:
            raise ConfigError("experiment.rounds must be >= 1")
        if e.eval_every < 1:
            raise ConfigError("experiment.eval_every must be >= 1")
        if not 0 < e.participation_fraction <= 1:
            raise ConfigError("experiment.participation_fraction must lie in (0, 1]")
        if e.global_lr < 0:
            raise ConfigError("experiment.global_lr must be non-negative")
        if not 0 <= e.seed < 2**64:
            raise ConfigError("experiment.seed must be a 64-bit unsigned integer")
        if self.participants_per_round < 2 and not (p.n_clients == 1 and self.aggregator.rule == "fedavg"):
            raise ConfigError("participation_fraction * n_clients must give at least 2 participants")
        if a.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack.kind {a.kind!r}")
        if a.kind != "none" and not 0 <= 2 * a.n_malicious < p.n_clients:
            raise ConfigError("attack.n_malicious must be below half of the clients")
        if self.model.kind not in ("logistic", "mlp"):
            raise ConfigError(f"unknown model.kind {self.model.kind!r}")
        try:
            AggregatorSpec(**dataclasses.asdict(self.aggregator))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def participants_per_round(self) -> int:
        return math.ceil(self.experiment.participation_fraction * self.partition.n_clients - 1e-9)

    @property
    def aggregator_spec(self) -> AggregatorSpec:
        return AggregatorSpec(**dataclasses.asdict(self.aggregator))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_values(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section.key=value`` overrides, e.g. ``with_values(**{"attack.kind": "gaussian"})``."""
        sections = {name: getattr(self, name) for name in SECTIONS}
        for key, value in dotted.items():
            section, name = _split_key(key)
            sections[section] = replace(sections[section], **{name: _coerce(SECTIONS[section], name, value)})
        return ExperimentConfig(**sections)


def _split_key(key: str) -> tuple[str, str]:
    if "." not in key:
        raise ConfigError(f"expected section.key, got {key!r}")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r}")
    if name not in {f.name for f in fields(SECTIONS[section])}:
        raise ConfigError(f"unknown key {name!r} in section [{section}]")
    return section, name


def _coerce(cls, name: str, raw):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if ftype in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {name}={raw!r} as {ftype}") from None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    overrides = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in parser.items(section):
            overrides[f"{section}.{key}"] = value
    for key in overrides:
        _split_key(key)
    return ExperimentConfig().with_values(**overrides)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)

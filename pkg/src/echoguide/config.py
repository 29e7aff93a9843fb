"""Experiment configuration: nested sections, JSON round-trip, overrides.

Config files are JSON objects whose sections mirror the dataclasses below.
Unknown sections or keys are rejected loudly so typos cannot silently fall
back to defaults; command-line `--set section.key=value` overrides win over
file values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from echoguide.evaluation import EvalConfig
from echoguide.nets import ModelConfig
from echoguide.phantom import PhantomConfig
from echoguide.training import FinetuneConfig, PretrainConfig


class ConfigError(Exception):
    """Malformed configuration file or override."""


@dataclass
class DataSection:
    root: str | None = None


@dataclass
class EvalSection:
    anchors_per_scan: int = 50
    leakage_tau: float = 5.0
    seq_len: int = 6
    strategy: str = "segmental"
    probe_pairs: int = 512
    probe_steps: int = 500
    phase_pairs: int = 500
    phase_gap: float = 0.3
    bench_iters: int = 100
    seed: int = 0

    def to_eval_config(self, protocol: str) -> EvalConfig:
        return EvalConfig(
            protocol=protocol,
            seq_len=self.seq_len,
            strategy=self.strategy,
            anchors_per_scan=self.anchors_per_scan,
            leakage_tau=self.leakage_tau,
        )


@dataclass
class AblateSection:
    axis: str | None = None
    values: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def to_dict(self) -> dict:
        return {f.name: asdict(getattr(self, f.name)) for f in fields(self)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTION_TYPES = {
    "data": DataSection,
    "phantom": PhantomConfig,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "eval": EvalSection,
    "ablate": AblateSection,
}


def _build_section(name: str, cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    unknown = set(raw) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        values = raw.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"section {name!r} must be an object")
        sections[name] = _build_section(name, cls, values)
    return ExperimentConfig(**sections)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return config_from_dict(raw)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply `section.key=value` overrides on top of a config."""
    raw = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key must be section.key, got {key!r}")
        section, name = parts
        if section not in raw:
            raise ConfigError(f"unknown config section {section!r}")
        raw[section][name] = _coerce(value)
    return config_from_dict(raw)

"""Experiment configuration: INI-style text with strict validation.

Every key has a type and an admissible range; unknown keys, missing
required keys and out-of-range values are reported with their line number.
``to_text`` renders every effective value, so a parsed config can be
written into a run header and parsed back unchanged.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

MODES = ("client", "instance_seq", "instance_par", "joint")
MISSING = object()


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _key(default=MISSING, kind=float, check=None, doc="", choices=None, optional=False):
    meta = {"kind": kind, "check": check, "doc": doc, "choices": choices,
            "optional": optional, "required": default is MISSING}
    if default is MISSING:
        return field(default=None, metadata=meta)
    return field(default=default, metadata=meta)


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _prob_open(x):
    return 0 < x < 1


@dataclass
class ExperimentSection:
    seed: int = _key(0, int, _nonneg, "run seed")
    rounds: int = _key(300, int, lambda x: 0 <= x <= 100_000, "round budget")
    clients: int = _key(kind=int, check=_positive, doc="number of clients")
    participation: float = _key(1.0, float, lambda x: 0 < x <= 1, "client sampling probability")
    partition: str = _key("iid", str, choices=("iid", "shards"))
    shards_per_client: int = _key(2, int, _positive)
    shard_size: int = _key(0, int, _nonneg, "0 derives it from the data size")


@dataclass
class ModelSection:
    kind: str = _key("logistic", str, choices=("logistic", "mlp"))
    dimension: int = _key(10, int, lambda x: x >= 2)
    classes: int = _key(2, int, lambda x: x >= 2)
    hidden: int = _key(16, int, _positive)
    learning_rate: float = _key(None, float, _positive, "defaults to 0.5 (logistic) or 0.1 (mlp)",
                                optional=True)


@dataclass
class PrivacySection:
    mode: str = _key(kind=str, choices=MODES)
    sigma_client: float = _key(0.0, float, _nonneg)
    sigma_instance: float = _key(0.0, float, _nonneg)
    clip_client: float = _key(1.0, float, _positive)
    clip_instance: float = _key(1.0, float, _positive)
    batch: int = _key(10, int, _positive)
    delta: float = _key(1e-3, float, _prob_open)
    lambda_max: int = _key(64, int, lambda x: 1 <= x <= 1024)
    estimator_samples: int = _key(0, int, lambda x: x == 0 or x >= 2, "0 means all participants")
    instance_samples: int = _key(32, int, lambda x: x >= 2)
    epsilon_budget: float = _key(None, float, _positive, optional=True)


@dataclass
class DataSection:
    kind: str = _key("synthetic", str, choices=("synthetic", "idx"))
    per_client: int = _key(100, int, _positive, "training examples per client")
    test_size: int = _key(1000, int, _nonneg)
    separation: float = _key(3.0, float, _nonneg)
    noise: float = _key(1.0, float, _positive)
    train_images: str = _key("", str)
    train_labels: str = _key("", str)
    test_images: str = _key("", str)
    test_labels: str = _key("", str)


@dataclass
class OutputSection:
    csv: str = _key("run/rounds.csv", str)


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    privacy: PrivacySection = field(default_factory=PrivacySection)
    data: DataSection = field(default_factory=DataSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_text(self) -> str:
        return to_text(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``privacy={"mode": "joint"}``."""
        out = {}
        for f in dataclasses.fields(self):
            sec = getattr(self, f.name)
            out[f.name] = dataclasses.replace(sec, **sections.get(f.name, {}))
        cfg = ExperimentConfig(**out)
        validate(cfg)
        return cfg


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)}


def _convert(raw: str, meta: dict, line: int, name: str):
    kind = meta["kind"]
    if meta["optional"] and raw.lower() in ("", "none"):
        return None
    try:
        if kind is int:
            value = int(raw)
        elif kind is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind.__name__}", line) from None
    if meta["choices"] and value not in meta["choices"]:
        raise ConfigError(f"{name}: {value!r} not one of {', '.join(meta['choices'])}", line)
    if meta["check"] and not meta["check"](value):
        raise ConfigError(f"{name}: value {value!r} out of range", line)
    return value


def parse_config(text: str) -> ExperimentConfig:
    values: dict[str, dict[str, tuple[Any, int]]] = {}
    section_line: dict[str, int] = {}
    section = None
    lineno = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            if section in section_line:
                raise ConfigError(f"duplicate section [{section}]", lineno)
            section_line[section] = lineno
            values[section] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[section]())}
        if key not in fields:
            raise ConfigError(f"unknown key {section}.{key}", lineno)
        if key in values[section]:
            raise ConfigError(f"duplicate key {section}.{key}", lineno)
        values[section][key] = (_convert(val, fields[key].metadata, lineno, f"{section}.{key}"),
                                lineno)

    built = {}
    for name, factory in SECTIONS.items():
        sec = factory()
        for f in dataclasses.fields(sec):
            if f.name in values.get(name, {}):
                setattr(sec, f.name, values[name][f.name][0])
            elif f.metadata["required"]:
                raise ConfigError(f"missing required key {name}.{f.name}",
                                  section_line.get(name, lineno))
        built[name] = sec
    cfg = ExperimentConfig(**built)
    if cfg.model.learning_rate is None:
        cfg.model.learning_rate = 0.5 if cfg.model.kind == "logistic" else 0.1

    def where(sec, key):
        return values.get(sec, {}).get(key, (None, section_line.get(sec)))[1]

    validate(cfg, where)
    return cfg


def validate(cfg: ExperimentConfig, where=lambda sec, key: None) -> None:
    """Cross-field checks that a single key's range cannot express."""
    p, d = cfg.privacy, cfg.data
    if d.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(d, key):
                raise ConfigError(f"data.{key} is required when data.kind = idx",
                                  where("data", "kind"))
    if d.kind == "synthetic" and p.batch > d.per_client:
        raise ConfigError(f"privacy.batch {p.batch} exceeds data.per_client {d.per_client}",
                          where("privacy", "batch"))


def to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in dataclasses.fields(sec):
            v = getattr(sec, f.name)
            if v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())

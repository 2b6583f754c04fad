"""Run configuration: one JSON document with model, train, synthetic and summary sections."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration; the CLI maps this to exit code 2."""


SUMMARY_DEFAULTS = {"budget": 0.15, "penalty": 1.0, "max_shots": None, "kts_features": "fused"}
SECTIONS = ("model", "train", "synthetic", "summary")


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        cfg = cls(**{k: dict(doc.get(k) or {}) for k in SECTIONS})
        cfg.resolve()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def set(self, dotted: str, value) -> None:
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key: {dotted}")
        getattr(self, section)[key] = value

    def resolve(self) -> None:
        """Fill defaults and validate every section."""
        try:
            self.model = ModelConfig.from_dict(self.model).to_dict()
            self.train = TrainConfig.from_dict(self.train).to_dict()
            self.synthetic = SyntheticSpec.from_dict(self.synthetic).to_dict()
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(self.summary) - set(SUMMARY_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown summary config keys: {sorted(unknown)}")
        self.summary = {**SUMMARY_DEFAULTS, **self.summary}
        if self.summary["kts_features"] not in ("fused", "visual"):
            raise ConfigError("summary.kts_features must be 'fused' or 'visual'")
        if not 0.0 <= float(self.summary["budget"]) <= 1.0:
            raise ConfigError("summary.budget must lie in [0, 1]")

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec.from_dict(self.synthetic)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in SECTIONS}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def parse_value(text: str):
    """Interpret a command-line override value as JSON, falling back to a bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text

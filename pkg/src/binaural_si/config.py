"""Pipeline configuration.

A YAML document with four sections (``data``, ``vqcpc``, ``predictor``,
``eval``), an optional top-level ``preset`` naming the defaults to start
from (``paper`` or ``toy``) and a root ``seed``.  Unknown keys are rejected.  ``--set
section.key=value`` overrides are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .vqcpc import VQCPCConfig


@dataclass
class DataConfig:
    speech_dir: str | None = None  # holds train/ dev/ test/ subdirectories
    rir_dir: str | None = None
    noise_dir: str | None = None
    synthesize: bool = False
    synth_utterances: dict = field(default_factory=lambda: {"train": 70, "dev": 15, "test": 25})
    synth_rirs: int = 8
    synth_noises: int = 8
    splits: list = field(default_factory=lambda: ["train", "dev", "test"])
    mixtures_per_utterance: int = 3
    snr_min: float = -10.0
    snr_max: float = 30.0
    mic_distance: float = 0.17
    speed_of_sound: float = 343.0
    external_labels: str | None = None


@dataclass
class PredictorConfig:
    heads: list = field(default_factory=lambda: ["small", "pool"])
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 300
    patience: int = 10


@dataclass
class EvalConfig:
    feature_sources: list = field(default_factory=lambda: ["vqcpc", "single-mel", "concat-mel"])
    datasets: list = field(default_factory=lambda: ["test"])
    predict_source: str = "vqcpc"
    predict_head: str = "pool"


SECTIONS = {"data": DataConfig, "vqcpc": VQCPCConfig, "predictor": PredictorConfig, "eval": EvalConfig}

PRESETS: dict[str, dict] = {
    "paper": {},
    "toy": {
        "data": {"synthesize": True, "synth_utterances": {"train": 150, "dev": 30, "test": 50}},
        "vqcpc": {
            "window": 16000,
            "filters": 64,
            "embedding_dim": 16,
            "codebook_size": 32,
            "feature_dim": 16,
            "prediction_steps": 2,
            "negatives": 2,
            "lr": 2e-3,
            "train_steps": 2000,
            "checkpoint_every": 500,
        },
        "predictor": {"lr": 3e-3, "max_epochs": 400},
    },
}

# fixed ids so stage seeds never shift when stages are added
STAGES = {"gen-data": 1, "label": 2, "train-vqcpc": 3, "extract": 4, "train-predictor": 5, "evaluate": 6, "predict": 7}


def stage_seed(root_seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([root_seed, STAGES[stage]]).generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class PipelineConfig:
    preset: str = "paper"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    vqcpc: VQCPCConfig = field(default_factory=VQCPCConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "data": dataclasses.asdict(self.data),
            "vqcpc": self.vqcpc.to_dict(),
            "predictor": dataclasses.asdict(self.predictor),
            "eval": dataclasses.asdict(self.eval),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "PipelineConfig":
        raw = copy.deepcopy(raw or {})
        if not isinstance(raw, dict):
            raise ConfigError("config document must be a mapping")
        preset = raw.pop("preset", "paper")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        seed = raw.pop("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        merged = {name: dict(PRESETS[preset].get(name, {})) for name in SECTIONS}
        for name, values in raw.items():
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            merged[name].update(values)
        sections = {}
        for name, klass in SECTIONS.items():
            known = {f.name for f in dataclasses.fields(klass)}
            bad = set(merged[name]) - known
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            try:
                sections[name] = klass(**merged[name])
            except TypeError as exc:
                raise ConfigError(f"invalid values in section {name!r}: {exc}") from exc
        cfg = cls(preset=preset, seed=seed, **sections)
        cfg.validate()
        return cfg

    def validate(self):
        d = self.data
        if d.snr_min > d.snr_max:
            raise ConfigError(f"snr_min {d.snr_min} exceeds snr_max {d.snr_max}")
        if d.mixtures_per_utterance < 1:
            raise ConfigError("mixtures_per_utterance must be >= 1")
        for h in self.predictor.heads:
            if h not in ("small", "pool"):
                raise ConfigError(f"unknown head kind {h!r}")
        for s in self.eval.feature_sources + [self.eval.predict_source]:
            if s not in ("vqcpc", "single-mel", "concat-mel"):
                raise ConfigError(f"unknown feature source {s!r}")
        if self.eval.predict_head not in ("small", "pool"):
            raise ConfigError(f"unknown head kind {self.eval.predict_head!r}")


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        try:
            parsed = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value in override {item!r}: {exc}") from exc
        if parts in (["preset"], ["seed"]):
            raw[parts[0]] = parsed
            continue
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = parts
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in override {item!r}")
        raw.setdefault(section, {})
        if raw[section] is None:
            raw[section] = {}
        raw[section][name] = parsed
    return raw


def load_config(path=None, overrides: list[str] | None = None) -> PipelineConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return PipelineConfig.from_dict(apply_overrides(raw, overrides or []))

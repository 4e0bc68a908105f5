"""Whole-experiment configuration: world, model, window, and both training
stages in one strictly validated tree, with desk-scale and full-scale
presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import WindowConfig
from .errors import ConfigError
from .model import ModelConfig
from .train import StageSettings
from .world import WorldConfig


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    pretrain: StageSettings = field(default_factory=lambda: StageSettings("pretrain"))
    finetune: StageSettings = field(default_factory=lambda: StageSettings("finetune"))
    modalities: Optional[tuple] = None  # restrict training/eval inputs
    corrupt_keep: float = 1.0
    seed: int = 7
    n_videos: int = 220
    frames_per_video: int = 220
    train_cap: Optional[int] = 2000
    eval_cap: Optional[int] = 500

    def __post_init__(self):
        if not (0.0 <= self.corrupt_keep <= 1.0):
            raise ConfigError(f"corrupt_keep must be in [0, 1], got {self.corrupt_keep}")
        if self.n_videos < 1 or self.frames_per_video < 1:
            raise ConfigError("n_videos and frames_per_video must be >= 1")
        if self.modalities is not None:
            self.modalities = tuple(self.modalities)
            unknown = set(self.modalities) - set(self.model.modalities())
            if unknown:
                raise ConfigError(f"modalities not in the model: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "model": self.model.to_dict(),
            "window": dataclasses.asdict(self.window),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "modalities": list(self.modalities) if self.modalities is not None else None,
            "corrupt_keep": self.corrupt_keep,
            "seed": self.seed,
            "n_videos": self.n_videos,
            "frames_per_video": self.frames_per_video,
            "train_cap": self.train_cap,
            "eval_cap": self.eval_cap,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        parsed = dict(raw)
        if "world" in parsed:
            parsed["world"] = WorldConfig.from_dict(parsed["world"])
        if "model" in parsed:
            parsed["model"] = ModelConfig.from_dict(parsed["model"])
        if "window" in parsed:
            window = parsed["window"]
            unknown = set(window) - {f.name for f in dataclasses.fields(WindowConfig)}
            if unknown:
                raise ConfigError(f"unknown window config keys: {sorted(unknown)}")
            parsed["window"] = WindowConfig(**window)
        for stage in ("pretrain", "finetune"):
            if stage in parsed:
                parsed[stage] = StageSettings.from_dict(parsed[stage])
        return cls(**parsed)


def desk_config(seed: int = 7) -> ExperimentConfig:
    """Small configuration sized for a CPU desk run."""
    return ExperimentConfig(
        seed=seed,
        pretrain=StageSettings("pretrain", epochs=30, warmup=6, seed=seed),
        finetune=StageSettings("finetune", epochs=30, warmup=6, seed=seed + 1),
    )


def full_config(seed: int = 7) -> ExperimentConfig:
    """Full-length schedule (50 epochs per stage, 20 warmup)."""
    return ExperimentConfig(
        seed=seed,
        pretrain=StageSettings("pretrain", epochs=50, warmup=20, seed=seed),
        finetune=StageSettings("finetune", epochs=50, warmup=20, seed=seed + 1),
    )


PRESETS = {"desk": desk_config, "full": full_config}


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return ExperimentConfig.from_dict(raw)

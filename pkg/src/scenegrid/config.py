"""Experiment configuration: one YAML document bundling the generator, model,
training, augmentation and sweep settings.  Every command writes a resolved
copy of its config next to its outputs, so runs are self-describing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geometry import AugmentConfig
from .models import ModelConfig
from .synth import SynthConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    manifest: str | None = None        # dataset manifest path for train/eval
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    density_counts: tuple[int, ...] = (32, 128, 512, 1024, 2048, 4096)
    crop_ratios: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    figures: bool = True

    def __post_init__(self):
        if any(c < 1 for c in self.density_counts):
            raise ConfigError("density counts must be positive")
        if any(not 0 < r <= 1 for r in self.crop_ratios):
            raise ConfigError("crop ratios must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "manifest": self.manifest,
            "synth": self.synth.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "augment": self.augment.to_dict(),
            "density_counts": list(self.density_counts),
            "crop_ratios": list(self.crop_ratios),
            "figures": self.figures,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            return cls(
                seed=int(data.get("seed", 0)),
                out_dir=str(data.get("out_dir", "runs/default")),
                manifest=data.get("manifest"),
                synth=SynthConfig.from_dict(data.get("synth", {})),
                model=ModelConfig.from_dict(data.get("model", {})),
                train=TrainConfig.from_dict(data.get("train", {})),
                augment=AugmentConfig.from_dict(data.get("augment", {})),
                density_counts=tuple(data.get("density_counts",
                                              (32, 128, 512, 1024, 2048, 4096))),
                crop_ratios=tuple(data.get("crop_ratios", (0.5, 0.6, 0.7, 0.8, 0.9, 1.0))),
                figures=bool(data.get("figures", True)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a YAML mapping")
    return ExperimentConfig.from_dict(doc)


def write_resolved_config(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.yaml"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
    return path

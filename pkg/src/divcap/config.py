"""Structured experiment configuration: nested schema, strict validation, echo.

Config files are YAML (JSON is a YAML subset). Unknown keys are rejected at
any nesting level; command-line flags override file values; the effective
config is echoed into the run directory so every run is re-runnable.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .discriminators import DiscriminatorConfig
from .features import AugmentParams, MelParams
from .generator import GeneratorConfig
from .training import ComponentMask, TrainConfig

COMPONENT_NAMES = ("nd", "sd", "le")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    train_manifest: str | None = None
    val_manifest: str | None = None
    eager_features: bool = True


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = True
    n_time_masks: int = 2
    max_time_width: int = 64
    n_freq_masks: int = 2
    max_freq_width: int = 8

    def to_params(self) -> AugmentParams | None:
        if not self.enabled:
            return None
        return AugmentParams(
            n_time_masks=self.n_time_masks,
            max_time_width=self.max_time_width,
            n_freq_masks=self.n_freq_masks,
            max_freq_width=self.max_freq_width,
        )


@dataclass(frozen=True)
class GeneratorSection:
    d_model: int = 128
    encoder_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    decoder_layers: int = 2
    decoder_heads: int = 4
    ffn_dim: int = 512
    dropout: float = 0.1
    noise_dim: int = 64
    max_len: int = 30
    pretrained_encoder: str | None = None

    def to_config(self, vocab_size: int, sigma: float, noise_mode: str) -> GeneratorConfig:
        return GeneratorConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            encoder_channels=tuple(self.encoder_channels),
            decoder_layers=self.decoder_layers,
            decoder_heads=self.decoder_heads,
            ffn_dim=self.ffn_dim,
            dropout=self.dropout,
            noise_dim=self.noise_dim,
            noise_sigma=sigma,
            noise_mode=noise_mode,
            max_len=self.max_len,
        )


@dataclass(frozen=True)
class DiscriminatorSection:
    embed_dim: int = 256
    hidden_dim: int = 256
    shared_dim: int = 256
    semantic_objective: str = "mse"

    def to_config(self, vocab_size: int, generator: GeneratorSection) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            shared_dim=self.shared_dim,
            encoder_channels=tuple(generator.encoder_channels),
            audio_dim=generator.d_model,
            semantic_objective=self.semantic_objective,
        )


@dataclass(frozen=True)
class TrainSection:
    sigma: float = 1.0
    lam: float = 1.0
    batch_size: int = 32
    learning_rate: float = 1e-4
    mle_epochs: int = 15
    disc_pretrain_epochs: int = 3
    adv_epochs: int = 25
    noise_mode: str = "per-step"
    components: tuple[str, ...] = COMPONENT_NAMES
    unpaired_per_clip: int = 1

    def to_config(self, seed: int, augment: AugmentParams | None) -> TrainConfig:
        unknown = sorted(set(self.components) - set(COMPONENT_NAMES))
        if unknown:
            raise ConfigError(f"unknown reward components {unknown}, valid: {COMPONENT_NAMES}")
        mask = ComponentMask(
            naturalness="nd" in self.components,
            semantic="sd" in self.components,
            evaluator="le" in self.components,
        )
        return TrainConfig(
            sigma=self.sigma,
            lam=self.lam,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            mle_epochs=self.mle_epochs,
            disc_pretrain_epochs=self.disc_pretrain_epochs,
            adv_epochs=self.adv_epochs,
            noise_mode=self.noise_mode,
            components=mask,
            seed=seed,
            unpaired_per_clip=self.unpaired_per_clip,
            augment=augment,
        )


@dataclass(frozen=True)
class GenerateSection:
    num_samples: int = 5
    beam_size: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    mel: MelParams = field(default_factory=MelParams)
    augment: AugmentSection = field(default_factory=AugmentSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    discriminator: DiscriminatorSection = field(default_factory=DiscriminatorSection)
    train: TrainSection = field(default_factory=TrainSection)
    generate: GenerateSection = field(default_factory=GenerateSection)

    def validate(self) -> "ExperimentConfig":
        """Construct every runtime config once so all invariants fire up front."""
        try:
            train_config = self.train.to_config(self.seed, self.augment.to_params())
            self.generator.to_config(
                vocab_size=16, sigma=train_config.sigma, noise_mode=train_config.noise_mode
            )
            self.discriminator.to_config(vocab_size=16, generator=self.generator)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.generate.num_samples < 1 or self.generate.beam_size < 1:
            raise ConfigError("num_samples and beam_size must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def echo(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_TOY_OVERRIDES: dict[str, Any] = {
    "augment": {"enabled": False},
    "generator": {
        "d_model": 48,
        "encoder_channels": [8, 16, 32, 32],
        "ffn_dim": 128,
        "dropout": 0.0,
        "noise_dim": 16,
        "max_len": 16,
    },
    "discriminator": {"embed_dim": 64, "hidden_dim": 64, "shared_dim": 64},
    "train": {"batch_size": 8, "learning_rate": 1e-3},
}


def _build(cls, data: Any, path: str):
    if not is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f.type if is_dataclass(f.type) else _DATACLASS_FIELDS.get((cls, name))
        child_path = f"{path}.{name}" if path else name
        if sub is not None:
            kwargs[name] = _build(sub, value, child_path)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


# Field annotations are strings under `from __future__ import annotations`,
# so nested dataclass fields are registered explicitly.
_DATACLASS_FIELDS = {
    (ExperimentConfig, "data"): DataSection,
    (ExperimentConfig, "mel"): MelParams,
    (ExperimentConfig, "augment"): AugmentSection,
    (ExperimentConfig, "generator"): GeneratorSection,
    (ExperimentConfig, "discriminator"): DiscriminatorSection,
    (ExperimentConfig, "train"): TrainSection,
    (ExperimentConfig, "generate"): GenerateSection,
}


def _deep_update(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(
    path: str | Path | None = None,
    preset: str = "full",
    overrides: dict | None = None,
) -> ExperimentConfig:
    """Assemble the effective config: preset defaults <- file <- overrides."""
    if preset not in ("full", "toy"):
        raise ConfigError(f"unknown preset {preset!r}")
    data: dict = dataclasses.asdict(ExperimentConfig())
    if preset == "toy":
        data = _deep_update(data, _TOY_OVERRIDES)
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        data = _deep_update(data, raw)
    if overrides:
        data = _deep_update(data, overrides)
    return config_from_dict(data)

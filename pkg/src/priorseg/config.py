"""Flat sectioned experiment configuration.

Five INI sections (dataset, prior, model, trainer, output) with typed keys.
Unknown sections or keys are hard errors, every key has a default, and
``serialize_config(parse_config(text))`` reproduces the text modulo
formatting, so snapshots written next to run outputs are authoritative.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .dataio import AugmentationParams
from .segmodel import DecoderSpec, EncoderSpec, FeatureDropoutConfig
from .shape_prior import DiscriminatorSpec, GanTrainConfig, GeneratorSpec
from .trainer import LossWeights, OptimConfig


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    root: str = "data/synthetic"
    fraction: str = "1/8"
    val_count: int = 0
    test_count: int = 0
    seed: int = 0
    train_ids: str = ""
    val_ids: str = ""
    test_ids: str = ""


@dataclass
class PriorConfig:
    latent_dim: int = 128
    gen_base_width: int = 64
    disc_base_width: int = 64
    learning_rate: float = 5e-5
    batch_size: int = 16
    epochs: int = 5000
    gp_weight: float = 10.0
    critic_steps: int = 5
    seed: int = 0


@dataclass
class ModelConfig:
    depth: int = 34
    base_width: int = 64
    decoder_widths: str = "256,128,64,32,16"
    dropout_rate: float = 0.5
    dropout_granularity: str = "channel"
    dropout_level: str = "deepest"
    pretrained: bool = False
    eval_size: int = 256
    seed: int = 0


@dataclass
class TrainerConfig:
    init_lr: float = 1e-3
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 200
    labeled_batch: int = 8
    unlabeled_batch: int = 8
    lambda_prior: float = 0.1
    gamma: float = 1.0
    gamma_rampup_iters: int = 0
    resize_to: int = 320
    crop_to: int = 256
    rotation: float = 15.0
    scale_min: float = 0.8
    scale_max: float = 1.25
    seed: int = 0


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    # Builders for the typed objects the library works with.

    def fraction(self) -> Fraction:
        return Fraction(self.dataset.fraction)

    def aug_params(self) -> AugmentationParams:
        t = self.trainer
        return AugmentationParams(
            resize_to=t.resize_to,
            crop_to=t.crop_to,
            rotation=t.rotation,
            scale_range=(t.scale_min, t.scale_max),
        )

    def encoder_spec(self) -> EncoderSpec:
        m = self.model
        return EncoderSpec(depth=m.depth, base_width=m.base_width, in_channels=1, pretrained=m.pretrained)

    def decoder_spec(self) -> DecoderSpec:
        widths = tuple(int(part) for part in self.model.decoder_widths.split(","))
        return DecoderSpec(widths=widths)  # type: ignore[arg-type]

    def dropout_config(self) -> FeatureDropoutConfig:
        m = self.model
        return FeatureDropoutConfig(
            drop_rate=m.dropout_rate, granularity=m.dropout_granularity, level=m.dropout_level
        )

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(latent_dim=self.prior.latent_dim, base_width=self.prior.gen_base_width)

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(base_width=self.prior.disc_base_width)

    def gan_config(self) -> GanTrainConfig:
        p = self.prior
        return GanTrainConfig(
            learning_rate=p.learning_rate,
            batch_size=p.batch_size,
            epochs=p.epochs,
            gp_weight=p.gp_weight,
            critic_steps=p.critic_steps,
            seed=p.seed,
        )

    def optim_config(self) -> OptimConfig:
        t = self.trainer
        return OptimConfig(
            init_lr=t.init_lr,
            lr_power=t.lr_power,
            momentum=t.momentum,
            weight_decay=t.weight_decay,
            epochs=t.epochs,
            labeled_batch=t.labeled_batch,
            unlabeled_batch=t.unlabeled_batch,
        )

    def loss_weights(self) -> LossWeights:
        t = self.trainer
        return LossWeights(
            lambda_prior=t.lambda_prior, gamma=t.gamma, gamma_rampup_iters=t.gamma_rampup_iters
        )


_SECTIONS = {
    "dataset": DatasetConfig,
    "prior": PriorConfig,
    "model": ModelConfig,
    "trainer": TrainerConfig,
    "output": OutputConfig,
}


def _convert(raw: str, target_type: type, section: str, key: str):
    text = raw.strip()
    try:
        if target_type is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return target_type(text)
    except ValueError as err:
        raise ValueError(f"[{section}] {key}: cannot parse {raw!r} as {target_type.__name__}") from err


def parse_config(source: str | Path) -> ExperimentConfig:
    """Parse a config file path or literal INI text; unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    source_text: str
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and "=" not in source):
        path = Path(source)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        source_text = path.read_text()
    else:
        source_text = str(source)
    try:
        parser.read_string(source_text)
    except configparser.Error as err:
        raise ValueError(f"malformed config: {err}") from err

    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]; expected one of {sorted(_SECTIONS)}")
        target = getattr(cfg, section)
        known = {f.name: f.type for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            current = getattr(target, key)
            setattr(target, key, _convert(raw, type(current), section, key))
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text: fixed section order, schema key order."""
    lines = []
    for section, cls in _SECTIONS.items():
        lines.append(f"[{section}]")
        target = getattr(cfg, section)
        for f in fields(cls):
            value = getattr(target, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_config(cfg))
    return path

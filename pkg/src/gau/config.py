"""Experiment configuration: the sections a run is described by."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from gau.critic import CriticConfig
from gau.generator import GeneratorConfig
from gau.sections import ConfigError, dump_sections, section_from_mapping
from gau.training import TrainConfig


@dataclass
class DataConfig:
    manifest: str = ""          # empty -> synthetic data
    synthetic_classes: int = 2
    synthetic_per_class: int = 500
    synthetic_noise: float = 0.05
    synthetic_seed: int = 0
    image_size: int = 64
    split_seed: int = 0


@dataclass
class EvalConfig:
    embedder_steps: int = 300
    embedder_seed: int = 0
    n_generated: int = 200
    bootstrap: int = 200
    classifier_steps: int = 300
    classifier_alpha: float = 1e-3
    classifier_beta1: float = 0.9
    classifier_beta2: float = 0.99


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"


SECTIONS = ("data", "generator", "critic", "training", "evaluation")


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; unknown sections/keys and bad values are all reported at once."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    problems: list[str] = []
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unparseable config: {exc}"]) from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section == "output":
            for key, raw in parser[section].items():
                if key == "dir":
                    cfg.output_dir = raw
                else:
                    problems.append(f"[output] unknown key {key!r}")
            continue
        if section not in SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        cls = type(getattr(cfg, section))
        value = section_from_mapping(cls, dict(parser[section]), section, problems)
        if value is not None:
            setattr(cfg, section, value)
    problems += cross_check(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def cross_check(cfg: ExperimentConfig) -> list[str]:
    problems = []
    size = cfg.data.image_size
    if cfg.generator.input_size != size:
        problems.append(f"generator.input_size {cfg.generator.input_size} != data.image_size {size}")
    if cfg.critic.input_size != size:
        problems.append(f"critic.input_size {cfg.critic.input_size} != data.image_size {size}")
    if not cfg.data.manifest and not 2 <= cfg.data.synthetic_classes <= 10:
        problems.append(f"data.synthetic_classes must lie in [2, 10], got {cfg.data.synthetic_classes}")
    if not cfg.data.manifest and cfg.generator.num_classes != cfg.data.synthetic_classes:
        problems.append(f"generator.num_classes {cfg.generator.num_classes} != "
                        f"data.synthetic_classes {cfg.data.synthetic_classes}")
    return problems


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    return parse_config(path.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    """Resolved config with every default written out."""
    text = dump_sections({s: getattr(cfg, s) for s in SECTIONS})
    return text + f"[output]\ndir = {cfg.output_dir}\n"

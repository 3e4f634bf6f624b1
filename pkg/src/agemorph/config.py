"""Run configuration: four typed sections (data, model, train, eval).

Configs are YAML files; every key has a documented default, unknown keys
are rejected, and any key can be overridden through the environment as
AGEMORPH_<SECTION>_<KEY> (e.g. AGEMORPH_TRAIN_LEARNING_RATE=2e-4).
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .conditioning import AgeGroupScheme
from .errors import ConfigError
from .losses import LossWeights
from .models import ModelConfig
from .trainer import TrainConfig

ENV_PREFIX = "AGEMORPH_"


@dataclass
class DataSection:
    source: str = "synth"          # "synth" or a directory of images
    metadata: str = ""             # metadata CSV for directory sources
    synth_n: int = 2000
    synth_seed: int = 0
    train_fraction: float = 0.9
    split_seed: int = 0
    split_by_subject: bool = False
    age_lower_bounds: list = field(default_factory=lambda: [11, 21, 31, 41, 51])


@dataclass
class ModelSection:
    gen_base_channels: int = 32
    gen_down_blocks: int = 2
    gen_res_blocks: int = 2
    disc_base_channels: int = 32
    disc_layers: int = 3


@dataclass
class TrainSection:
    run_dir: str = "runs/default"
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 100
    max_steps: int = 0
    critic_steps_per_gen_step: int = 1
    seed: int = 0
    resolution: list = field(default_factory=lambda: [64, 64])
    checkpoint_interval: int = 1000
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    exclude_source_targets: bool = False
    log_interval: int = 50
    lambda_adv: float = 10.0
    lambda_att: float = 2.0
    lambda_cls: float = 100.0
    lambda_gp: float = 10.0
    lambda_tv: float = 5e-5


@dataclass
class EvalSection:
    threshold: float = 73.975
    source_group: int = 0
    targets: list = field(default_factory=lambda: [1, 2, 3, 4])
    estimator: str = "oracle"
    embedder: str = "oracle"
    oracle_epochs: int = 5
    oracle_seed: int = 0
    max_sources: int = 64


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def load(cls, path: str | Path | None = None,
             env: Mapping[str, str] | None = None) -> "RunConfig":
        """Defaults <- YAML file (if given) <- AGEMORPH_* environment overrides."""
        raw: dict[str, dict[str, Any]] = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            loaded = yaml.safe_load(p.read_text())
            if loaded is None:
                loaded = {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"config root must be a mapping of sections: {p}")
            raw = loaded
        merged = _apply_env(raw, os.environ if env is None else env)
        return cls.from_dict(merged)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RunConfig":
        sections: dict[str, Any] = {}
        for name, value in raw.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown config section '{name}'")
            if not isinstance(value, Mapping):
                raise ConfigError(f"config section '{name}' must be a mapping")
            sections[name] = _build_section(name, _SECTIONS[name], value)
        for name, section_cls in _SECTIONS.items():
            sections.setdefault(name, section_cls())
        return cls(**sections)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def scheme(self) -> AgeGroupScheme:
        return AgeGroupScheme.from_config(self.data.age_lower_bounds)

    def resolution(self) -> tuple[int, int]:
        res = self.train.resolution
        if isinstance(res, int):
            return (res, res)
        if isinstance(res, (list, tuple)) and len(res) == 2:
            return (int(res[0]), int(res[1]))
        raise ConfigError(f"train.resolution must be an int or [h, w], got {res!r}")

    def loss_weights(self) -> LossWeights:
        t = self.train
        return LossWeights(lambda_adv=t.lambda_adv, lambda_att=t.lambda_att,
                           lambda_cls=t.lambda_cls, lambda_gp=t.lambda_gp,
                           lambda_tv=t.lambda_tv)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            weights=self.loss_weights(), learning_rate=t.learning_rate,
            batch_size=t.batch_size, epochs=t.epochs, max_steps=t.max_steps,
            critic_steps_per_gen_step=t.critic_steps_per_gen_step, seed=t.seed,
            resolution=self.resolution(), checkpoint_interval=t.checkpoint_interval,
            adam_beta1=t.adam_beta1, adam_beta2=t.adam_beta2,
            exclude_source_targets=t.exclude_source_targets,
            log_interval=t.log_interval,
        )

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(gen_base_channels=m.gen_base_channels,
                           gen_down_blocks=m.gen_down_blocks,
                           gen_res_blocks=m.gen_res_blocks,
                           disc_base_channels=m.disc_base_channels,
                           disc_layers=m.disc_layers)


def _build_section(name: str, section_cls: type, values: Mapping[str, Any]):
    known = {f.name: f for f in fields(section_cls)}
    kwargs: dict[str, Any] = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        kwargs[key] = _coerce(f"{name}.{key}", value, known[key])
    return section_cls(**kwargs)


def _coerce(full_key: str, value: Any, f: dataclasses.Field) -> Any:
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"config key '{full_key}' expects a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, str):
            try:
                value = int(value, 0)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)) \
                or int(value) != value:
            raise ConfigError(f"config key '{full_key}' expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, str):  # YAML leaves '2e-4' a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{full_key}' expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{full_key}' expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if isinstance(value, int):  # e.g. resolution: 64
            return value
        if not isinstance(value, list):
            raise ConfigError(f"config key '{full_key}' expects a list, got {value!r}")
        return value
    return value


def _apply_env(raw: Mapping[str, Any], env: Mapping[str, str]) -> dict:
    merged: dict[str, dict[str, Any]] = {k: dict(v) for k, v in raw.items()
                                         if isinstance(v, Mapping)}
    for k, v in raw.items():
        if not isinstance(v, Mapping):
            merged[k] = v  # preserved so from_dict reports it
    for var, text in sorted(env.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in _SECTIONS or not key:
            raise ConfigError(f"environment override {var} does not name a config section")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse environment override {var}: {exc}") from exc
        merged.setdefault(section, {})[key] = value
    return merged


def document_defaults() -> str:
    """One line per config key with its default; shown in the CLI help."""
    lines = ["configuration keys (YAML sections; env override AGEMORPH_<SECTION>_<KEY>):"]
    for name, section_cls in _SECTIONS.items():
        for f in fields(section_cls):
            default = f.default if f.default is not dataclasses.MISSING \
                else f.default_factory()
            lines.append(f"  {name}.{f.name} = {default!r}")
    return "\n".join(lines)

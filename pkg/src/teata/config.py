"""Run configuration: strict TOML parsing into dataclasses, dotted-key CLI
overrides, deterministic serialization, and hashing for checkpoint metadata.

Unknown keys are rejected with their full path. Defaults follow the training
recipe this package implements: 16 prompt pairs, loss weights 1 / 0.25 / 1,
smoothing 0.1, 64-image batches with 4 per identity, and the two-stage
learning-rate plans.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class GeneratorSpec:
    name: str = "domain"
    seed: int = 0
    num_identities: int = 8
    images_per_identity: int = 8
    clothing_state: str = "SC"
    num_cameras: int = 3
    noise_std: float = 0.05


@dataclass
class DataConfig:
    root: str = "data"
    domains: list[str] = field(default_factory=list)
    unseen: list[str] = field(default_factory=list)
    generators: list[GeneratorSpec] = field(default_factory=list)


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 32
    patch_size: int = 4
    pre_dim: int = 48
    embed_dim: int = 32
    token_width: int = 32
    depth: int = 2
    text_depth: int = 2
    heads: int = 4
    num_pairs: int = 16
    init_seed: int = 0
    init_std: float = 0.02
    pretrained_checkpoint: str = ""


@dataclass
class TrainConfig:
    method: str = "TEATA"
    seed: int = 0
    stage1_epochs: int = 30
    stage2_epochs: int = 20
    batch_size: int = 64
    instances_per_identity: int = 4
    lambda1: float = 1.0
    lambda2: float = 0.25
    lambda3: float = 1.0
    epsilon: float = 0.1
    triplet_margin: float = 0.3
    init_mode: str = "KA_T"
    prompt_tuning: bool = False
    prompt_tokens: str = "both"
    slow_pace_encoder: bool = True
    stage1_lr: float = 3.5e-4
    stage2_warmup_start: float = 5e-7
    stage2_peak_lr: float = 5e-6
    stage2_warmup_epochs: int = 10
    stage2_decay_epoch: int = 40
    stage2_decay_factor: float = 0.1
    slow_factor: float = 10.0
    weight_decay: float = 1e-4
    augment: bool = False
    deterministic: bool = True
    eval_after_each_step: bool = True


@dataclass
class EvalConfig:
    max_rank: int = 20
    protocol_override: str = ""  # "", "STANDARD", or "CC"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_METHODS = ("TEATA", "SFT", "JOINT")


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a table, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown configuration key {path}.{key}")
        spec = known[key]
        if spec.name == "generators":
            if not isinstance(value, list):
                raise ConfigError(f"{path}.{key}: expected an array of tables")
            kwargs[key] = [
                _build(GeneratorSpec, item, f"{path}.{key}[{i}]")
                for i, item in enumerate(value)
            ]
        elif isinstance(value, dict):
            raise ConfigError(f"{path}.{key}: unexpected table")
        else:
            if str(spec.type) == "float" and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a table")
    sections = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}
    kwargs = {}
    for key, value in data.items():
        if key not in sections:
            raise ConfigError(f"unknown configuration section {key!r}")
        kwargs[key] = _build(sections[key], value, key)
    config = RunConfig(**kwargs)
    validate(config)
    return config


def validate(config: RunConfig) -> None:
    train = config.train
    if train.method not in _METHODS:
        raise ConfigError(f"train.method must be one of {_METHODS}, got {train.method!r}")
    if train.init_mode not in ("KA_T", "KA_V", "RANDOM"):
        raise ConfigError(f"train.init_mode must be KA_T, KA_V, or RANDOM, got {train.init_mode!r}")
    if train.prompt_tokens not in ("both", "specific", "shared"):
        raise ConfigError("train.prompt_tokens must be both, specific, or shared")
    if train.batch_size % train.instances_per_identity != 0:
        raise ConfigError("train.batch_size must be a multiple of train.instances_per_identity")
    if not 0.0 <= train.epsilon < 1.0:
        raise ConfigError("train.epsilon must lie in [0, 1)")
    if train.seed < 0:
        raise ConfigError("train.seed must be non-negative")
    if train.stage2_epochs > 60:
        raise ConfigError("train.stage2_epochs cannot exceed the 60-epoch stage-2 plan")
    if config.eval.protocol_override not in ("", "STANDARD", "CC"):
        raise ConfigError("eval.protocol_override must be empty, STANDARD, or CC")
    for spec in config.data.generators:
        if spec.clothing_state not in ("SC", "CC"):
            raise ConfigError(
                f"data.generators: clothing_state must be SC or CC, got {spec.clothing_state!r}"
            )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)


def to_dict(config: RunConfig) -> dict:
    return asdict(config)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values parse as TOML literals."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if len(keys) < 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        try:
            value = tomllib.loads(f"v = {raw.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw.strip()
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} crosses a non-table value")
        node[keys[-1]] = value
    return data


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _toml_scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value).__name__} to TOML")


def dump_toml(config: RunConfig) -> str:
    """Deterministic TOML for the fully resolved configuration."""
    data = to_dict(config)
    lines: list[str] = []
    for section in ("data", "model", "train", "eval"):
        body = data[section]
        lines.append(f"[{section}]")
        for key, value in body.items():
            if key == "generators":
                continue
            lines.append(f"{key} = {_toml_scalar(value)}")
        lines.append("")
        if section == "data":
            for spec in body.get("generators", []):
                lines.append("[[data.generators]]")
                for key, value in spec.items():
                    lines.append(f"{key} = {_toml_scalar(value)}")
                lines.append("")
    return "\n".join(lines)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()

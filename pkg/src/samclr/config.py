"""Run configuration: a TOML file mirroring the module configs, unknown keys rejected.

Example (every key optional, shown with its default)::

    seed = 0

    [paths]
    manifest = "data/manifest.jsonl"
    cache = "data/regions.bin"
    labels = ""             # empty: labels from the manifest
    eval_manifest = ""      # empty: evaluate on the training manifest
    eval_labels = ""

    [sampler]   # SamplerConfig; mode is set by `samclr train --mode`
    [train]     # TrainConfig (seed comes from the top level)
    [encoder]   # EncoderConfig
    [head]      # HeadConfig
    [jitter]    # JitterParams
    [knn]       # KnnConfig
    [probe]     # ProbeConfig
    [eval]
    bank_fraction = 0.5     # leading share of the eval set used as the KNN/probe bank
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .contrastive import EncoderConfig, HeadConfig, TrainConfig
from .evaluation import KnnConfig, ProbeConfig
from .image_ops import JitterParams
from .sampling import SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    manifest: str = "data/manifest.jsonl"
    cache: str = "data/regions.bin"
    labels: str = ""
    eval_manifest: str = ""
    eval_labels: str = ""


@dataclass(frozen=True)
class EvalConfig:
    bank_fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.bank_fraction < 1:
            raise ValueError("bank_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    jitter: JitterParams = field(default_factory=JitterParams)
    knn: KnnConfig = field(default_factory=KnnConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: Path = Path(".")

    def path(self, name: str) -> Optional[Path]:
        """Config path resolved against the config file's directory; None when empty."""
        value = getattr(self.paths, name)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


SECTIONS = {
    "paths": PathsConfig, "sampler": SamplerConfig, "train": TrainConfig, "encoder": EncoderConfig,
    "head": HeadConfig, "jitter": JitterParams, "knn": KnnConfig, "probe": ProbeConfig, "eval": EvalConfig,
}
# fields owned elsewhere: the CLI picks the mode, the top level carries the seed
RESERVED = {("sampler", "mode"), ("train", "seed")}


def _check_type(section: str, key: str, default: Any, value: Any) -> Any:
    where = f"[{section}].{key}"
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return tuple(value)
    if isinstance(value, bool):
        raise ConfigError(f"{where} must not be a boolean")
    if isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    if default is None or isinstance(value, type(default)):
        return value
    raise ConfigError(f"{where} must be {type(default).__name__}")


def _coerce(cls, section: str, values: dict[str, Any]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known or (section, key) in RESERVED:
            raise ConfigError(f"unknown key [{section}].{key}")
        kwargs[key] = _check_type(section, key, known[key].default, value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_config(data: dict[str, Any], base_dir: Path = Path(".")) -> RunConfig:
    parts: dict[str, Any] = {}
    seed = 0
    for key, value in data.items():
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("seed must be an integer")
            seed = value
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            parts[key] = _coerce(SECTIONS[key], key, value)
        else:
            raise ConfigError(f"unknown key {key}")
    train = parts.get("train", TrainConfig())
    parts["train"] = dataclasses.replace(train, seed=seed)
    cfg = RunConfig(seed=seed, base_dir=base_dir, **parts)
    if cfg.encoder.output_side(cfg.sampler.view_size) < 1:
        raise ConfigError(f"view_size {cfg.sampler.view_size} is too small for the encoder")
    return cfg


def load_config(path: Optional[str | Path]) -> RunConfig:
    if path is None:
        return parse_config({})
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, path.parent)

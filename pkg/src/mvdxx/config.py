"""Pipeline configuration: JSON files plus dotted ``--set`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys or values of the wrong type."""


@dataclass
class DataSection:
    out_dir: str = "runs/data"
    n_objects: int = 64
    n_cond: int = 10
    resolution: int = 64
    grid_res: int = 64
    seed: int = 0


@dataclass
class VaeSection:
    dataset: str = "runs/data"
    out_dir: str = "runs/vae"
    channels: tuple = (32, 64, 96)
    groups: int = 8
    kl_weight: float = 1e-6
    steps: int = 6000
    batch_size: int = 16
    learning_rate: float = 2e-3
    weight_decay: float = 0.0
    holdout_objects: int = 8
    seed: int = 0
    log_every: int = 200


@dataclass
class DiffusionSection:
    dataset: str = "runs/data"
    vae: str = "runs/vae/mvae.ckpt"
    out_dir: str = "runs/diffusion"
    objects: int = 0  # first n objects of the dataset, 0 = all
    steps: int = 2000
    batch_size: int = 4
    keep_views: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    widths: tuple = (32, 64)
    emb_dim: int = 64
    groups: int = 8
    seed: int = 0
    log_every: int = 100


@dataclass
class SampleSection:
    dataset: str = "runs/data"
    vae: str = "runs/vae/mvae.ckpt"
    checkpoint: str = "runs/diffusion/stage1.ckpt"
    out_dir: str = "runs/sample"
    object_index: int = 0
    n_cond: int = 1
    views: str = "0..31"
    steps: int = 75
    sampler: str = "ddpm"
    seed: int = 0


@dataclass
class ReconSection:
    run_dir: str = "runs/sample"
    res: int = 64
    threshold: float = 0.5


@dataclass
class EvalSection:
    run_dir: str = "runs/sample"
    dataset: str = "runs/data"
    views: str = ""
    csv: bool = True


@dataclass
class Config:
    data: DataSection = field(default_factory=DataSection)
    vae: VaeSection = field(default_factory=VaeSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    sample: SampleSection = field(default_factory=SampleSection)
    reconstruct: ReconSection = field(default_factory=ReconSection)
    evaluate: EvalSection = field(default_factory=EvalSection)

    def to_json(self) -> dict:
        return asdict(self)


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    if isinstance(default, str):
        return str(value)
    return value


def _apply(section, values: dict, prefix: str) -> None:
    names = {f.name for f in fields(section)}
    for k, v in values.items():
        key = f"{prefix}{k}"
        if k not in names:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(section, k)
        if is_dataclass(current):
            if not isinstance(v, dict):
                raise ConfigError(f"{key}: expected an object")
            _apply(current, v, key + ".")
        else:
            setattr(section, k, _coerce(key, v, current))


def load_config(path=None, overrides=()) -> Config:
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides."""
    cfg = Config()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _apply(cfg, data, "")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        nested: dict = value
        for part in reversed(key.split(".")):
            nested = {part: nested}
        _apply(cfg, nested, "")
    return cfg


def parse_views(spec: str) -> list[int]:
    """'0..7' -> [0..7]; '0,3,5' -> [0, 3, 5]; ranges are inclusive."""
    out: list[int] = []
    for part in str(spec).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            a, b = part.split("..", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out

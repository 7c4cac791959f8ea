"""Run configuration: nested dataclasses, strict YAML loading, content digest.

Unknown keys are a hard error so a typo never silently falls back to a
default. Numeric strings are accepted for float fields because YAML 1.1
reads scientific notation like "1e-4" as a string.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigurationError

ABLATION_AXES = (
    "time-conditioning",
    "next-state",
    "candidates",
    "timestep-range",
    "method",
    "pair-selection",
)


@dataclass
class TaskConfig:
    dim: int = 64
    n_classes: int = 5
    texture_scale: float = 0.05


@dataclass
class ScheduleConfig:
    n_steps: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.2


@dataclass
class PretrainConfig:
    n_per_class: int = 400
    hidden: tuple[int, ...] = (256, 256)
    n_time_freq: int = 8
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3


@dataclass
class ScorerConfig:
    n_pairs: int = 10000
    holdout_pairs: int = 1000
    embed_dim: int = 16
    hidden: tuple[int, ...] = (512,)
    n_time_freq: int = 8
    temperature: float = 10.0
    time_conditioned: bool = True
    pseudo_clean_input: bool = False
    pair_matched_noise: bool = True
    encoder_lr: float = 1e-5
    head_lr: float = 1e-3
    epochs: int = 80
    batch_size: int = 64
    accuracy_floor: float = 0.8
    draws_per_pair: int = 4
    n_bins: int = 5


@dataclass
class AlignConfig:
    k: int = 4
    kappa_frac: float = 0.25
    lam: float = 0.95
    eta: float = 1.0
    mode: str = "single-tau"
    next_state: str = "random"
    pair_selection: str = "best-worst"
    batch_size: int = 32
    lr: float = 1e-5
    epochs: int = 50
    batches_per_epoch: int = 16
    t_range: tuple[int, int] | None = None


@dataclass
class EvalConfig:
    n_per_class: int = 500
    drift_trajectories: int = 100
    n_permutations: int = 1000


@dataclass
class AblateConfig:
    axes: tuple[str, ...] = ABLATION_AXES
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = ""
    task: TaskConfig = field(default_factory=TaskConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        arms = typing.get_args(hint)
        if value is None:
            if type(None) in arms:
                return None
            raise ConfigurationError(f"{where}: null is not allowed")
        last = None
        for arm in arms:
            if arm is type(None):
                continue
            try:
                return _coerce(value, arm, where)
            except ConfigurationError as err:
                last = err
        raise last
    if dataclasses.is_dataclass(hint):
        return _from_mapping(hint, value, where)
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(
                f"{where}: expected a list, got {type(value).__name__}")
        if args[-1] is not Ellipsis and len(value) != len(args):
            raise ConfigurationError(
                f"{where}: expected exactly {len(args)} entries, got {len(value)}")
        item = args[0]
        return tuple(_coerce(v, item, f"{where}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigurationError(
                    f"{where}: expected a number, got {value!r}") from None
        raise ConfigurationError(f"{where}: expected a number, got {value!r}")
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigurationError(f"{where}: unsupported config field type {hint}")


def _from_mapping(cls, mapping, where: str):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigurationError(f"{where or cls.__name__}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls)]
    unknown = sorted(set(mapping) - set(names))
    if unknown:
        raise ConfigurationError(
            f"{where or 'config'}: unknown keys {unknown}; allowed keys are {names}")
    kwargs = {}
    for f in fields(cls):
        if f.name in mapping:
            sub = f"{where}.{f.name}" if where else f.name
            kwargs[f.name] = _coerce(mapping[f.name], hints[f.name], sub)
    return cls(**kwargs)


def config_from_mapping(mapping: dict | None) -> RunConfig:
    return _from_mapping(RunConfig, mapping, "")


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        mapping = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigurationError(f"{path}: not valid YAML ({err})") from err
    if mapping is not None and not isinstance(mapping, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return config_from_mapping(mapping)


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def as_mapping(cfg: RunConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(as_mapping(cfg), sort_keys=True))


def config_digest(cfg: RunConfig) -> str:
    """Content hash of everything that affects results. The output directory
    is deliberately excluded so a rerun into a fresh directory matches."""
    payload = as_mapping(cfg)
    payload.pop("out_dir", None)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]

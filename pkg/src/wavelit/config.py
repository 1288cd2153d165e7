"""Run configuration: nested dataclasses serialized as YAML.

Every field has a default, so an empty file is a valid config. Unknown keys
anywhere in the tree are rejected with their dotted path.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field

import yaml

from .mixer import MixerFlags
from .model import WaveLiTConfig
from .objectives import LossWeights
from .synthdata import TrajectorySpec
from .training import FinetuneConfig, LoopConfig, ScheduleConfig, desk_schedule


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    systems: list[TrajectorySpec] = field(default_factory=lambda: [TrajectorySpec("heat2d", (32, 32), 16, 1.0, {"nu": 0.002})])
    n_train: int = 200
    n_val: int = 20
    # optional trajectory files written by ``generate``; override ``systems``
    train_file: str = ""
    val_file: str = ""
    corpus_file: str = ""


@dataclass
class FinetuneSection:
    settings: FinetuneConfig = field(default_factory=FinetuneConfig)
    steps: int = 500
    peak_lr: float = 1e-4
    from_checkpoint: str = ""


@dataclass
class EvalConfig:
    n_steps: int = 0  # 0 -> as many as the validation trajectories allow
    windows: dict[str, list[int]] = field(default_factory=lambda: {"one_step": [1, 1], "t1_20": [1, 20], "t21_60": [21, 60]})
    use_ema: bool = True


def _default_loop() -> LoopConfig:
    return LoopConfig(steps=5000, schedule=desk_schedule(5000, 3e-3), log_every=10, eval_every=500, checkpoint_every=500)


@dataclass
class RunConfig:
    model: WaveLiTConfig = field(default_factory=WaveLiTConfig)
    training: LoopConfig = field(default_factory=_default_loop)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _build(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if _is_dataclass_type(tp):
        return from_dict(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        non_none = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _build(non_none[0], value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_build(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a sequence")
        return tuple(value)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return dict(value)
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{path}: expected {tp.__name__}, got {value!r}")
    if tp is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got {value!r}")
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {k: _build(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or '<root>'}: {e}") from e


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from e
    cfg = from_dict(RunConfig, data)
    try:
        cfg.model.validate()
    except ValueError as e:
        raise ConfigError(f"model: {e}") from e
    return cfg


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


__all__ = [
    "ConfigError",
    "DataConfig",
    "EvalConfig",
    "FinetuneSection",
    "LossWeights",
    "MixerFlags",
    "RunConfig",
    "ScheduleConfig",
    "dumps",
    "from_dict",
    "load",
    "loads",
    "to_dict",
]

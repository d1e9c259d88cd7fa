"""Run configuration: one JSON document, strictly validated."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .asl import LossConfig
from .prompts import PromptConfig
from .scoring import ClassifierConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    mode: str = "aligned"
    seed: int = 0
    emb_dim: int | None = None
    text_dim: int | None = None

    def __post_init__(self):
        if self.mode not in ("aligned", "random"):
            raise ValueError(f"encoder mode must be 'aligned' or 'random', got {self.mode!r}")


@dataclass(frozen=True)
class EvalConfig:
    kind: str = "partial_label"
    topk: tuple[int, ...] = (3, 5)


@dataclass(frozen=True)
class PathsConfig:
    data: str | None = None
    test_data: str | None = None
    split: str | None = None


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    def digest(self) -> str:
        return config_digest(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return from_dict(cls, d)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(raw)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def config_digest(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def from_dict(cls, d, where: str = "config"):
    """Build dataclass ``cls`` from a mapping, recursing into nested dataclasses.

    Unknown keys are rejected; missing keys take the dataclass defaults.
    """
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in d.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = from_dict(hint, value, f"{where}.{key}")
        elif typing.get_origin(hint) is tuple:
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key}: expected a list")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = _check_scalar(hint, value, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _check_scalar(hint, value, where):
    allowed = typing.get_args(hint) or (hint,)
    if value is None:
        if type(None) in allowed:
            return None
        raise ConfigError(f"{where}: null is not allowed")
    if bool in allowed:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if int in allowed and float not in allowed:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if float in allowed:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if str in allowed and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


__all__ = ["ConfigError", "EncoderConfig", "EvalConfig", "PathsConfig", "RunConfig", "config_digest",
           "from_dict", "LossConfig", "ClassifierConfig", "PromptConfig", "TrainConfig"]

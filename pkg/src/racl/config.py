"""Run configuration: one JSON document holding every tunable.

Unknown keys are rejected with the dotted path of the offending field. The
resolved config is hashed (sha256 of canonical JSON) and the hash is stamped
on every artifact a run writes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from racl.augment import AugmentConfig
from racl.errors import ConfigError
from racl.losses import RaclWeights
from racl.reconstruct import SpectrogramConfig


@dataclass(frozen=True)
class AudioSection:
    sample_rate: int = 16000
    target_len: int = 64600

    def __post_init__(self):
        if self.sample_rate <= 0 or self.target_len <= 0:
            raise ConfigError("audio.sample_rate and audio.target_len must be positive")


@dataclass(frozen=True)
class FeatureSection:
    layers: int = 12
    dim: int = 64
    extractor_seed: int = 1234
    kernel_size: int = 0  # 0 selects the adaptive size from the layer count

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1:
            raise ConfigError("features.layers and features.dim must be positive")
        if self.kernel_size < 0 or (self.kernel_size and self.kernel_size % 2 == 0):
            raise ConfigError("features.kernel_size must be 0 (adaptive) or a positive odd number")


@dataclass(frozen=True)
class HeadSection:
    hidden: int = 64
    embed: int = 32


@dataclass(frozen=True)
class OptimSection:
    base_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    decay_factor: float = 0.5
    decay_every: int = 10


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 100
    batch_size: int = 32
    seed: int = 688
    average_window: int = 5
    augment_pools: dict = field(default_factory=dict)
    reconstruct_dev: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if self.average_window < 1:
            raise ConfigError("train.average_window must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    audio: AudioSection = field(default_factory=AudioSection)
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    features: FeatureSection = field(default_factory=FeatureSection)
    head: HeadSection = field(default_factory=HeadSection)
    losses: RaclWeights = field(default_factory=RaclWeights)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)

    def __post_init__(self):
        if self.spectrogram.sample_rate != self.audio.sample_rate:
            raise ConfigError("spectrogram.sample_rate must equal audio.sample_rate")
        if self.audio.target_len < self.spectrogram.fft_size:
            raise ConfigError("audio.target_len must be at least one FFT frame")

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def signal_hash(self) -> str:
        """Hash of the settings that determine reconstructed audio, shared by every run that reuses it."""
        return config_hash({"audio": self.to_dict()["audio"], "spectrogram": self.to_dict()["spectrogram"],
                            "seed": self.train.seed})

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{path}.{k}'.lstrip('.') for k in unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        where = f"{path}.{f.name}".lstrip(".")
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, where)
        else:
            kwargs[f.name] = _coerce(hint, value, where)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(hint, value, where):
    origin = typing.get_origin(hint)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(hint)
        inner = args[0]
        if len(args) != 2 or args[1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} values")
        return tuple(_coerce(inner, v, where) for v in value)
    if origin is dict or hint is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return dict(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    return value


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a JSON config (defaults if ``path`` is None), then RACL_SEED, then ``overrides``."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"{p}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    env_seed = os.environ.get("RACL_SEED")
    if env_seed is not None:
        try:
            data.setdefault("train", {})["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"RACL_SEED must be an integer, got {env_seed!r}") from None
    # explicit overrides (command-line flags) win over the environment
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        data.setdefault(section, {})[key] = value
    return from_dict(data)


def _schema_for(cls) -> dict:
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            props[f.name] = _schema_for(hint)
        elif typing.get_origin(hint) is tuple:
            inner = typing.get_args(hint)[0]
            props[f.name] = {"type": "array", "items": {"type": _json_type(inner)}}
        elif typing.get_origin(hint) is dict or hint is dict:
            props[f.name] = {"type": "object", "additionalProperties": {"type": "string"}}
        else:
            props[f.name] = {"type": _json_type(hint)}
    return {"type": "object", "properties": props, "additionalProperties": False}


def _json_type(t) -> str:
    return {bool: "boolean", int: "integer", float: "number", str: "string"}.get(t, "string")


def config_schema() -> dict:
    schema = _schema_for(RunConfig)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "RACL run configuration"
    return schema

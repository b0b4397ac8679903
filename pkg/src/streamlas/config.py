"""Strict JSON experiment configuration.

Every field has a default, so ``{}`` is a valid config. Unknown keys, wrong
types and invalid values raise :class:`ConfigError` with the dotted path of
the offending field. Environment variables are never consulted.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .attention import AttentionConfig
from .encoder import EncoderStack, LayerSpec, paper_layers
from .harness import ToyPreset
from .speller import N_SPECIAL, ModelConfig
from .training import TrainRecipe


class ConfigError(ValueError):
    pass


@dataclass
class EncoderSection:
    input_dim: int | None = None  # None: taken from the data
    layers: list = field(default_factory=paper_layers)
    lc_block: int = 64
    lc_right: int = 32
    frame_stack: int = 1


@dataclass
class ModelSection:
    vocab_size: int | None = None  # None: data vocabulary plus the special tokens
    embed_dim: int = 64
    speller_hidden: int = 512
    encoder: EncoderSection = field(default_factory=EncoderSection)
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def build(self, data_vocab: int, data_dim: int) -> ModelConfig:
        enc = dataclasses.asdict(self.encoder)
        enc["layers"] = list(self.encoder.layers)
        if enc["input_dim"] is None:
            enc["input_dim"] = data_dim
        vocab = self.vocab_size if self.vocab_size is not None else data_vocab + N_SPECIAL
        return ModelConfig(vocab_size=vocab, embed_dim=self.embed_dim,
                           speller_hidden=self.speller_hidden, encoder=EncoderStack(**enc),
                           attention=self.attention)


@dataclass
class DataConfig:
    train_path: str | None = None  # JSONL; None: use the generator
    dev_path: str | None = None
    seed: int = 0
    n_utts: int = 2200
    n_train: int = 2000
    vocab_size: int = 20
    len_range: tuple = (4, 12)
    dur_range: tuple = (4, 10)
    noise_std: float = 0.1
    dim: int = 16


@dataclass
class DecodeConfig:
    beam: int = 5
    temperature: float = 1.0
    max_len: int | None = None

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class IOConfig:
    checkpoint_dir: str = "runs/checkpoints"
    log_dir: str = "runs/logs"
    output_dir: str = "runs/out"


@dataclass
class TableConfig:
    which: str = "T3"
    seeds: list = field(default_factory=lambda: [0])
    rows: list | None = None
    preset: ToyPreset = field(default_factory=ToyPreset)
    reuse_checkpoints: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    float64: bool = True
    model: ModelSection = field(default_factory=ModelSection)
    recipe: TrainRecipe = field(default_factory=TrainRecipe)
    data: DataConfig = field(default_factory=DataConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    io: IOConfig = field(default_factory=IOConfig)
    table: TableConfig = field(default_factory=TableConfig)


# list fields whose elements are themselves dataclasses
_ELEMENTS = {(EncoderSection, "layers"): LayerSpec}


def _check_scalar(tp, value, path):
    if tp is typing.Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp!r}")


def _convert(tp, value, path, element=None):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null is not allowed")
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path, element)
    if value is None:
        raise ConfigError(f"{path}: null is not allowed")
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp in (list, tuple) or origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if element is not None:
            items = [from_dict(element, v, f"{path}[{i}]") for i, v in enumerate(value)]
        else:
            items = list(value)
            for i, v in enumerate(items):
                if not isinstance(v, (int, float, str)) or isinstance(v, bool):
                    raise ConfigError(f"{path}[{i}]: expected a number or string, got {v!r}")
        return tuple(items) if (tp is tuple or origin is tuple) else items
    return _check_scalar(tp, value, path)


def from_dict(cls, obj, path: str = ""):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys."""
    where = path or "<root>"
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(repr, unknown))}; "
                          f"allowed: {', '.join(sorted(names))}")
    kwargs = {}
    for key, value in obj.items():
        sub = f"{path}.{key}" if path else key
        kwargs[key] = _convert(hints[key], value, sub, _ELEMENTS.get((cls, key)))
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def loads(text: str) -> ExperimentConfig:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_dict(ExperimentConfig, obj)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def to_dict(cfg) -> dict:
    """JSON-ready dict of a config (round-trips through :func:`from_dict`)."""
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v) if f.init}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v
    return conv(cfg)


def defaults_table() -> list:
    """(dotted key, default) pairs for every config field."""
    out = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(v):
                walk(v, key + ".")
            else:
                out.append((key, json.dumps(to_dict(v) if isinstance(v, list) else
                                            list(v) if isinstance(v, tuple) else v)))
    walk(ExperimentConfig(), "")
    return out

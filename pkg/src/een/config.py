"""Experiment configuration: TOML in, validated dataclasses out.

Every field has a default, so an empty file is a valid config. Unknown keys
and wrongly typed values are rejected with the dotted field name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .datasets import DotWorldSpec, ModeOffsetSpec
from .errors import ConfigError
from .inference import validate_ks
from .model import ArchSpec
from .training import AltMinConfig, PhaseSchedule

DATASET_KINDS = ("mode_offset", "dot_world")
MODEL_KINDS = ("deterministic", "een", "een-joint", "altmin")


@dataclass
class DatasetConfig:
    kind: str = "mode_offset"
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0
    cache_dir: str = ""
    mode_offset: ModeOffsetSpec = field(default_factory=ModeOffsetSpec)
    dot_world: DotWorldSpec = field(default_factory=DotWorldSpec)

    @property
    def spec(self):
        return self.mode_offset if self.kind == "mode_offset" else self.dot_world


@dataclass
class ModelConfig:
    """Architecture minus the data shapes, which come from the dataset.

    ``kind = "auto"`` picks ``mlp`` for vector data and ``conv`` for frames.
    """

    kind: str = "auto"
    layers: int = 3
    feature_maps: int = 64
    kernel: int = 4
    stride: int = 2
    pad: int = 1
    hidden: int = 64
    latent_dim: int = 2
    batch_norm: bool = True
    output_activation: str = "tanh"
    phi_layers: int = 2
    phi_feature_maps: int = 32
    phi_hidden: int = 64

    def to_arch(self, input_shape, target_shape) -> ArchSpec:
        kw = dataclasses.asdict(self)
        if self.kind == "auto":
            kw["kind"] = "conv" if len(input_shape) == 3 else "mlp"
        return ArchSpec(input_shape=tuple(input_shape), target_shape=tuple(target_shape), **kw)


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [1, 2, 4, 8])
    norm: str = "l2"
    peak: float = 2.0
    seed: int = 0
    split: str = "test"


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = ""
    checkpoint_every: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    altmin: AltMinConfig = field(default_factory=AltMinConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        if self.checkpoint_every < 1:
            raise ConfigError("must be >= 1", "checkpoint_every")
        d = self.dataset
        if d.kind not in DATASET_KINDS:
            raise ConfigError(f"must be one of {DATASET_KINDS}, got {d.kind!r}", "dataset.kind")
        if len(d.split) != 3 or any(f < 0 for f in d.split) or abs(sum(d.split) - 1.0) > 1e-9:
            raise ConfigError(f"must be three non-negative fractions summing to 1, got {d.split}", "dataset.split")
        for kind in DATASET_KINDS:
            try:
                getattr(d, kind).validate()
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(str(exc), f"dataset.{kind}") from exc
        if self.model.kind not in ("auto", "conv", "mlp"):
            raise ConfigError(f"unknown architecture kind {self.model.kind!r}", "model.kind")
        self.model.to_arch(*self.data_shapes()).validate()
        self.schedule.seed = self.seed
        self.schedule.validate()
        self.altmin.validate()
        if self.altmin.latent_dim is not None and self.altmin.latent_dim != self.model.latent_dim:
            raise ConfigError(f"{self.altmin.latent_dim} differs from model.latent_dim {self.model.latent_dim}",
                              "altmin.latent_dim")
        validate_ks(self.eval.ks)
        if self.eval.norm not in ("l1", "l2"):
            raise ConfigError(f"unknown norm {self.eval.norm!r}", "eval.norm")
        if self.eval.peak <= 0:
            raise ConfigError("must be > 0", "eval.peak")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError("must be train, val or test", "eval.split")
        return self

    def data_shapes(self) -> tuple[tuple, tuple]:
        """(input_shape, target_shape) implied by the dataset spec."""
        s = self.dataset.spec
        if self.dataset.kind == "mode_offset":
            return (s.input_dim,), (s.target_dim,)
        return (s.context, s.grid, s.grid), (s.horizon, s.grid, s.grid)

    def arch(self) -> ArchSpec:
        return self.model.to_arch(*self.data_shapes())

    def to_dict(self, include_out_dir: bool = True) -> dict:
        d = _strip_none(dataclasses.asdict(self))
        del d["schedule"]["seed"]  # mirrors the top-level seed
        if not include_out_dir:
            d.pop("out_dir", None)
        return d

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @property
    def config_hash(self) -> str:
        """Content hash of the resolved config; the output directory is excluded."""
        text = tomli_w.dumps(self.to_dict(include_out_dir=False))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_strip_none(v) for v in obj]
    return obj


# ---------------------------------------------------------------- coercion


def _check_scalar(value, kind, name):
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif kind is str:
        ok = isinstance(value, str)
    elif kind is list:
        ok = isinstance(value, list)
    else:
        raise TypeError(f"unsupported config field type {kind}")
    if not ok:
        raise ConfigError(f"expected {kind.__name__}, got {type(value).__name__} {value!r}", name)
    return value


def _build(cls, table, prefix: str):
    if not isinstance(table, dict):
        raise ConfigError(f"expected a table, got {type(table).__name__}", prefix.rstrip("."))
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(fields))
    if unknown:
        raise ConfigError("unknown key", prefix + unknown[0])
    kwargs = {}
    for name, value in table.items():
        hint = hints[name]
        full = prefix + name
        if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
            options = [a for a in typing.get_args(hint) if a is not type(None)]
            hint = options[0]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, full + ".")
        else:
            kwargs[name] = _check_scalar(value, typing.get_origin(hint) or hint, full)
    return cls(**kwargs)


def from_dict(table: dict) -> ExperimentConfig:
    if isinstance(table.get("schedule"), dict) and "seed" in table["schedule"]:
        raise ConfigError("set the top-level seed instead", "schedule.seed")
    return _build(ExperimentConfig, table, "").validate()


def loads(text: str) -> ExperimentConfig:
    try:
        table = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"not valid TOML: {exc}") from exc
    return from_dict(table)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return loads(text)

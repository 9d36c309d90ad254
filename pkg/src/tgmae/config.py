"""Flat ``key = value`` run configuration.

Unprefixed keys are :class:`TrainConfig` fields; ``mask.*`` keys set the
:class:`~tgmae.masking.MaskSpec` and ``model.*`` keys override
:class:`~tgmae.model.ModelConfig`. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .masking import MaskSpec
from .model import ModelConfig


@dataclass
class TrainConfig:
    base_lr: float | None = None  # 1.5e-4 pretrain, 1e-3 finetune
    min_lr: float = 0.0
    weight_decay: float = 0.05
    betas: tuple | None = None  # (0.9, 0.95) pretrain, (0.9, 0.999) finetune
    batch_size: int = 32
    epochs: int = 100
    warmup_epochs: int | None = None  # defaults to 40/200 of epochs
    layer_decay: float = 0.75
    drop_path: float = 0.1
    flip_enabled: bool = False
    crop_scale: tuple = (0.66, 1.0)
    seed: int = 0
    contrastive: bool = False
    lam: float = 1.0
    tau: float = 0.07
    mse_masked_only: bool = True
    norm_targets: bool = False  # per-patch standardized targets when true
    num_captions: int = 3
    simmap_source: str = "toy"  # "toy" | "imported"
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    dump_masks: bool = True

    def resolved_base_lr(self, finetune: bool) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return 1e-3 if finetune else 1.5e-4

    def resolved_betas(self, finetune: bool) -> tuple[float, float]:
        if self.betas is not None:
            return tuple(self.betas)
        return (0.9, 0.999) if finetune else (0.9, 0.95)

    def resolved_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return int(round(self.epochs * 40 / 200))

    def validate(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.resolved_warmup() < self.epochs:
            raise ConfigError("warmup_epochs must be smaller than epochs")
        if self.contrastive and self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2")
        if not 0 < self.layer_decay <= 1:
            raise ConfigError("layer_decay must lie in (0, 1]")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale must satisfy 0 < min <= max <= 1")
        if self.num_captions < 1:
            raise ConfigError("num_captions must be at least 1")
        if self.simmap_source not in ("toy", "imported"):
            raise ConfigError("simmap_source must be 'toy' or 'imported'")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    model: dict = field(default_factory=dict)  # ModelConfig overrides

    def model_config(self, video_shape, patch) -> ModelConfig:
        for key, actual in (("video_shape", tuple(video_shape)), ("patch", tuple(patch))):
            if key in self.model and tuple(self.model[key]) != actual:
                raise ConfigError(f"model.{key}={self.model[key]} does not match the corpus ({actual})")
        kwargs = dict(self.model, video_shape=tuple(video_shape), patch=tuple(patch))
        return ModelConfig(**kwargs)

    def to_entries(self) -> dict[str, str]:
        out = {}
        for f in fields(TrainConfig):
            v = getattr(self.train, f.name)
            if v is not None:
                out[f.name] = _fmt(v)
        for f in fields(MaskSpec):
            out[f"mask.{f.name}"] = _fmt(getattr(self.mask, f.name))
        for k, v in self.model.items():
            out[f"model.{k}"] = _fmt(v)
        return out


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(raw: str, annotation, key: str):
    text = raw.strip()
    if typing.get_origin(annotation) in (typing.Union, types.UnionType):
        if text.lower() in ("none", ""):
            return None
        annotation = next(a for a in typing.get_args(annotation) if a is not type(None))
    try:
        if annotation is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is tuple or typing.get_origin(annotation) is tuple:
            return tuple(float(x) for x in text.strip("()").split(","))
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None


_TRAIN_TYPES = typing.get_type_hints(TrainConfig)
_MASK_TYPES = typing.get_type_hints(MaskSpec)
_MODEL_TYPES = typing.get_type_hints(ModelConfig)


def parse_entries(text: str, source: str = "<config>") -> dict[str, str]:
    entries = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def apply_entries(run: RunConfig, entries: dict[str, str]) -> RunConfig:
    train_types, mask_types = _TRAIN_TYPES, _MASK_TYPES
    train_updates, mask_updates, model_updates = {}, {}, dict(run.model)
    for key, raw in entries.items():
        if key.startswith("mask."):
            name = key[5:]
            if name not in mask_types:
                raise ConfigError(f"unknown config key {key!r}")
            mask_updates[name] = _coerce(raw, mask_types[name], key)
        elif key.startswith("model."):
            name = key[6:]
            if name not in _MODEL_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            if name in ("video_shape", "patch"):
                model_updates[name] = tuple(int(x) for x in raw.split(","))
            else:
                model_updates[name] = _coerce(raw, _MODEL_TYPES[name], key)
        elif key in train_types:
            train_updates[key] = _coerce(raw, train_types[key], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        train = dataclasses.replace(run.train, **train_updates)
        mask = dataclasses.replace(run.mask, **mask_updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train.validate()
    return RunConfig(train, mask, model_updates)


def load_run_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    run = RunConfig()
    if path is not None:
        run = apply_entries(run, parse_entries(Path(path).read_text(encoding="utf-8"), str(path)))
    extra = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        k, _, v = item.partition("=")
        extra[k.strip()] = v.strip()
    run = apply_entries(run, extra)
    run.train.validate()
    return run


def write_run_config(path, run: RunConfig) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in run.to_entries().items()), encoding="utf-8")

"""JSON run configuration with strict key checking and flag overrides.

One nested document drives the whole pipeline; unknown keys are rejected so
typos fail loudly. Any leaf is overridable from the command line with
``--set section.key=value`` (values parsed as JSON, falling back to string).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .data import CropConfig, SynthConfig
from .errors import UsageError
from .losses import LossWeights
from .training import TrainConfig
from .unet import UNetConfig


@dataclass(frozen=True)
class RunConfig:
    """Defaults form a consistent 32-cube synthetic pipeline; real datasets
    override crop/unet dims together (see the iac/coarse crop profiles)."""

    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    crop: CropConfig = field(default_factory=lambda: CropConfig(
        dims=(32, 32, 32), spacing=(1.0, 1.0, 1.0)))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        unet=UNetConfig(dims=(32, 32, 32))))
    hd95_mode: str = "pooled"
    workers: int = 1

    def __post_init__(self):
        if self.hd95_mode not in ("pooled", "directed_max"):
            raise UsageError(f"hd95_mode must be pooled or directed_max, got {self.hd95_mode!r}")
        if self.workers < 1:
            raise UsageError("workers must be >= 1")


_TUPLE_FIELDS = {"dims", "spacing", "seeds"}


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _from_plain(cls, doc, path=""):
    if not isinstance(doc, dict):
        raise UsageError(f"config section {path or 'root'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise UsageError(f"unknown config keys at {path or 'root'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        if is_dataclass(f.type) or (isinstance(f.type, str) and _dataclass_for(f.type)):
            kwargs[name] = _from_plain(_dataclass_for(f.type) or f.type, value, sub)
        elif name in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "SynthConfig": SynthConfig,
    "CropConfig": CropConfig,
    "TrainConfig": TrainConfig,
    "UNetConfig": UNetConfig,
    "LossWeights": LossWeights,
    "RunConfig": RunConfig,
}


def _dataclass_for(annotation):
    if isinstance(annotation, type) and is_dataclass(annotation):
        return annotation
    return _SECTION_TYPES.get(str(annotation))


def default_config() -> RunConfig:
    return RunConfig()


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(doc: dict) -> RunConfig:
    return _from_plain(RunConfig, doc)


def load_config(path=None, overrides=()) -> RunConfig:
    doc = _to_plain(default_config())
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        _deep_update(doc, user, "")
    for item in overrides:
        _apply_override(doc, item)
    return config_from_dict(doc)


def _deep_update(base: dict, update: dict, path: str):
    if not isinstance(update, dict):
        raise UsageError(f"config section {path or 'root'} must be an object")
    for key, value in update.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value, sub)
        else:
            base[key] = value


def _apply_override(doc: dict, item: str):
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise UsageError(f"unknown config section {part!r} in override {item!r}")
        node = node[part]
    node[parts[-1]] = value

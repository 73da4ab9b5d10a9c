"""Model and training configuration, including the per-dataset presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

ROUTING_MODES = ("static", "dynamic")
FRONTEND_VARIANTS = ("elu_gate", "conv_plain", "multi_filter", "multi_filter_maxpool")
PRECISIONS = {"f32": np.float32, "f64": np.float64}

# Published per-dataset hyperparameters: batch size, front-end l2 constant,
# filter count, filter size, initial learning rate, capsule count, and the
# capsule dimension pair (convolutional capsules / class capsules).  All
# non-front-end layers use an l2 constant of 0.01.
PRESETS: dict[str, dict] = {
    "20news": dict(batch_size=40, l2_gate=0.001, filters=256, filter_size=5,
                   lr=0.001, capsules=6, caps_dim=10, class_caps_dim=16, num_classes=20),
    "reuters10": dict(batch_size=40, l2_gate=0.001, filters=256, filter_size=3,
                      lr=0.0001, capsules=6, caps_dim=10, class_caps_dim=16, num_classes=10),
    "mr2004": dict(batch_size=50, l2_gate=0.001, filters=256, filter_size=3,
                   lr=0.001, capsules=6, caps_dim=16, class_caps_dim=16, num_classes=2),
    "mr2005": dict(batch_size=50, l2_gate=0.02, filters=256, filter_size=1,
                   lr=0.0001, capsules=16, caps_dim=16, class_caps_dim=24, num_classes=2),
    "trec-qa": dict(batch_size=50, l2_gate=0.0085, filters=256, filter_size=5,
                    lr=0.001, capsules=16, caps_dim=32, class_caps_dim=16, num_classes=6),
    "mpqa": dict(batch_size=40, l2_gate=0.01, filters=256, filter_size=1,
                 lr=0.00008, capsules=16, caps_dim=8, class_caps_dim=16, num_classes=2),
    "imdb": dict(batch_size=50, l2_gate=0.01, filters=256, filter_size=6,
                 lr=0.001, capsules=6, caps_dim=8, class_caps_dim=16, num_classes=2),
}


@dataclass
class ModelConfig:
    """Every architecture and training knob in one place.

    ``max_len`` of None means "derive from the training split" (95th
    percentile of sequence lengths).
    """

    dataset: str = "custom"
    num_classes: int = 2
    batch_size: int = 50
    l2_gate: float = 0.001
    l2_other: float = 0.01
    filters: int = 256          # front-end feature channels
    filter_size: int = 3        # front-end kernel rows
    lr: float = 0.001
    capsules: int = 6           # convolutional capsule count
    caps_dim: int = 16          # convolutional capsule dimension
    class_caps_dim: int = 16    # class capsule dimension
    dropout: float = 0.5
    epochs: int = 10
    seed: int = 0
    embed_dim: int = 300
    max_len: int | None = None
    routing: str = "static"
    route_iters: int = 3
    frontend: str = "elu_gate"
    with_decoder: bool = False
    decoder_hidden: tuple[int, int] = (512, 1024)
    recon_weight: float = 0.03
    precision: str = "f32"

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def validate(self) -> "ModelConfig":
        positive = ("num_classes", "batch_size", "filters", "filter_size", "lr",
                    "capsules", "caps_dim", "class_caps_dim", "epochs", "embed_dim",
                    "route_iters")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.l2_gate < 0 or self.l2_other < 0:
            raise ConfigError("l2 constants must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.routing not in ROUTING_MODES:
            raise ConfigError(f"unknown routing mode {self.routing!r}")
        if self.frontend not in FRONTEND_VARIANTS:
            raise ConfigError(f"unknown front-end variant {self.frontend!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.max_len is not None and self.max_len < 1:
            raise ConfigError(f"max_len must be positive, got {self.max_len}")
        if len(self.decoder_hidden) != 2 or any(h < 1 for h in self.decoder_hidden):
            raise ConfigError(f"decoder_hidden needs two positive sizes, got {self.decoder_hidden}")
        if self.recon_weight < 0:
            raise ConfigError("recon_weight must be non-negative")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["decoder_hidden"] = list(self.decoder_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "decoder_hidden" in data:
            data = dict(data, decoder_hidden=tuple(data["decoder_hidden"]))
        return cls(**data).validate()


# Optimizer/training view of the same record.
TrainConfig = ModelConfig

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ModelConfig)}


def preset_config(name: str, **overrides) -> ModelConfig:
    """Build a config from a named dataset preset plus overrides."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    merged = dict(PRESETS[name], dataset=name)
    merged.update(overrides)
    return ModelConfig(**merged).validate()


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key == "max_len":
        return None if raw in ("auto", "none") else int(raw)
    if key == "decoder_hidden":
        parts = [int(p) for p in raw.replace(",", " ").split()]
        return tuple(parts)
    if key == "with_decoder":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"with_decoder must be boolean, got {raw!r}")
    kind = _FIELD_TYPES.get(key, "str")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` config file into a raw dict."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key != "preset" and key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = raw if key == "preset" else _coerce(key, raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def load_config(path=None, **overrides) -> ModelConfig:
    """Assemble a config: preset defaults, then file values, then overrides."""
    file_values = read_config_file(path) if path is not None else {}
    preset = overrides.pop("preset", None) or file_values.pop("preset", None)
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset], dataset=preset)
    merged.update(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(merged) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ModelConfig(**merged).validate()

"""Run configuration: a flat `section.key = value` text format with a closed
schema. Unknown keys are rejected by name, values are type-checked, and a
config echoes back as parseable text so every run can record exactly what it
used. Defaults reproduce the published training recipe.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .augment import AugmentConfig
from .denoise import DenoiseConfig
from .errors import ConfigError
from .models import ModelSpec
from .training import TrainConfig


@dataclass(frozen=True)
class ConfigField:
    key: str
    kind: str                                # int|float|bool|str|ints|floats
    default: object
    choices: tuple[str, ...] | None = None


SCHEMA: tuple[ConfigField, ...] = (
    ConfigField("data.folds", "int", 3),
    ConfigField("data.seed", "int", 20221),
    ConfigField("data.image_size", "int", 0),
    ConfigField("sampler.beta", "float", 0.9999),
    ConfigField("denoise.enabled", "bool", True),
    ConfigField("denoise.bypass_threshold", "float", 2.0),
    ConfigField("denoise.h_factor", "float", 0.8),
    ConfigField("denoise.patch_size", "int", 5),
    ConfigField("denoise.max_patch_distance", "int", 15),
    ConfigField("augment.hflip_p", "float", 0.5),
    ConfigField("augment.vflip_p", "float", 0.5),
    ConfigField("augment.rotate_p", "float", 0.5),
    ConfigField("augment.rotation_range", "float", 180.0),
    ConfigField("augment.noise_p", "float", 0.3),
    ConfigField("augment.noise_sigma", "floats", (2.0, 12.0)),
    ConfigField("augment.blur_p", "float", 0.3),
    ConfigField("augment.blur_sigma", "floats", (0.4, 1.6)),
    ConfigField("augment.motion_p", "float", 0.3),
    ConfigField("augment.motion_length", "ints", (3, 9)),
    ConfigField("augment.brightness_p", "float", 0.3),
    ConfigField("augment.brightness_delta", "float", 32.0),
    ConfigField("augment.contrast_p", "float", 0.3),
    ConfigField("augment.contrast_delta", "float", 0.25),
    ConfigField("augment.mix_prob", "float", 0.15),
    ConfigField("augment.mix_alpha", "float", 1.0),
    ConfigField("train.batch_size", "int", 32),
    ConfigField("train.max_epochs", "int", 100),
    ConfigField("train.patience_epochs", "int", 10),
    ConfigField("train.lr_max", "float", 5e-4),
    ConfigField("train.lr_min", "float", 5e-6),
    ConfigField("train.weight_decay", "float", 0.01),
    ConfigField("train.ema_decay", "float", 0.999),
    ConfigField("train.focal_alpha", "float", 0.25),
    ConfigField("train.focal_gamma", "float", 2.0),
    ConfigField("train.cache_limit", "int", 5000),
    ConfigField("model.backbones", "strs",
                ("swinv2-tiny", "convnextv2-tiny", "dinobloom-small")),
    ConfigField("model.head_dims", "ints", (512, 256, 128, 64)),
    ConfigField("model.dropout", "float", 0.1),
    ConfigField("tta.k", "int", 8),
    ConfigField("ensemble.average", "str", "logit", ("logit", "probability")),
    ConfigField("ensemble.use_ema", "bool", True),
    ConfigField("cl.self_confidence_max", "float", 0.1),
)

_SCHEMA_MAP: dict[str, ConfigField] = {f.key: f for f in SCHEMA}


def _parse_value(field: ConfigField, raw: str) -> object:
    raw = raw.strip()
    try:
        if field.kind == "int":
            return int(raw)
        if field.kind == "float":
            return float(raw)
        if field.kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if field.kind == "str":
            if field.choices and raw not in field.choices:
                raise ValueError(f"must be one of {field.choices}")
            return raw
        if field.kind == "ints":
            return tuple(int(p.strip()) for p in raw.split(",") if p.strip())
        if field.kind == "floats":
            return tuple(float(p.strip()) for p in raw.split(",") if p.strip())
        if field.kind == "strs":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {field.key!r}: {raw!r} ({exc})") from None
    raise ConfigError(f"unhandled field kind {field.kind!r} for {field.key!r}")


def _format_value(field: ConfigField, value: object) -> str:
    if field.kind == "bool":
        return "true" if value else "false"
    if field.kind in ("ints", "floats", "strs"):
        return ",".join(repr(v) if field.kind == "floats" else str(v)
                        for v in value)   # type: ignore[union-attr]
    if field.kind == "float":
        return repr(float(value))          # round-trips exactly
    return str(value)


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Raw `key = value` pairs from config text; syntax and duplicates only."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"{origin}:{lineno}: key must be section.name, got {key!r}")
        if key in pairs:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        pairs[key] = raw.strip()
    return pairs


class PipelineConfig:
    """Immutable validated configuration; unknown keys are rejected."""

    def __init__(self, values: Mapping[str, object]):
        unknown = sorted(set(values) - set(_SCHEMA_MAP))
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        merged = {f.key: f.default for f in SCHEMA}
        merged.update(values)
        self._values: dict[str, object] = merged

    @classmethod
    def defaults(cls) -> "PipelineConfig":
        return cls({})

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        pairs = parse_config_text(path.read_text(encoding="utf-8"), str(path))
        return cls.defaults().with_raw(pairs)

    def with_raw(self, pairs: Mapping[str, str]) -> "PipelineConfig":
        values = dict(self._values)
        for key, raw in pairs.items():
            field = _SCHEMA_MAP.get(key)
            if field is None:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(field, raw)
        return PipelineConfig(values)

    def with_overrides(self, assignments: Sequence[str]) -> "PipelineConfig":
        pairs: dict[str, str] = {}
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            key, raw = item.split("=", 1)
            pairs[key.strip()] = raw.strip()
        return self.with_raw(pairs)

    def get(self, key: str) -> object:
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def to_text(self) -> str:
        lines = []
        section = None
        for field in SCHEMA:
            this_section = field.key.split(".", 1)[0]
            if this_section != section:
                if section is not None:
                    lines.append("")
                section = this_section
            lines.append(f"{field.key} = {_format_value(field, self._values[field.key])}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")

    # Typed accessors used by the pipeline verbs.

    def denoise_config(self) -> DenoiseConfig | None:
        if not self.get("denoise.enabled"):
            return None
        return DenoiseConfig(
            bypass_threshold=self.get("denoise.bypass_threshold"),
            h_factor=self.get("denoise.h_factor"),
            patch_size=self.get("denoise.patch_size"),
            max_patch_distance=self.get("denoise.max_patch_distance"),
        )

    def augment_config(self) -> AugmentConfig:
        def pair(key, cast):
            values = self.get(key)
            if len(values) != 2:
                raise ConfigError(f"{key!r} must have exactly 2 values, got {values}")
            return (cast(values[0]), cast(values[1]))

        return AugmentConfig(
            hflip_p=self.get("augment.hflip_p"),
            vflip_p=self.get("augment.vflip_p"),
            rotate_p=self.get("augment.rotate_p"),
            rotation_range=self.get("augment.rotation_range"),
            noise_p=self.get("augment.noise_p"),
            noise_sigma_range=pair("augment.noise_sigma", float),
            blur_p=self.get("augment.blur_p"),
            blur_sigma_range=pair("augment.blur_sigma", float),
            motion_p=self.get("augment.motion_p"),
            motion_length_range=pair("augment.motion_length", int),
            brightness_p=self.get("augment.brightness_p"),
            brightness_delta=self.get("augment.brightness_delta"),
            contrast_p=self.get("augment.contrast_p"),
            contrast_delta=self.get("augment.contrast_delta"),
            mix_prob=self.get("augment.mix_prob"),
            mix_alpha=self.get("augment.mix_alpha"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.get("train.batch_size"),
            max_epochs=self.get("train.max_epochs"),
            patience_epochs=self.get("train.patience_epochs"),
            lr_max=self.get("train.lr_max"),
            lr_min=self.get("train.lr_min"),
            weight_decay=self.get("train.weight_decay"),
            ema_decay=self.get("train.ema_decay"),
            focal_alpha=self.get("train.focal_alpha"),
            focal_gamma=self.get("train.focal_gamma"),
            image_size=self.get("data.image_size"),
            cache_limit=self.get("train.cache_limit"),
            seed=self.get("data.seed"),
        )

    def model_specs(self, num_classes: int = 13) -> list[ModelSpec]:
        head_dims = self.get("model.head_dims")
        if len(head_dims) != 4:
            raise ConfigError(
                f"model.head_dims must have exactly 4 values, got {head_dims}")
        return [ModelSpec.for_backbone(backbone_id, num_classes=num_classes,
                                       head_dims=tuple(head_dims),
                                       dropout_rate=self.get("model.dropout"))
                for backbone_id in self.get("model.backbones")]

"""TOML configuration: sections [model], [tune], [pipeline], [injection], [eval]."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..adapters import ScaleMap, default_scale_map, load_weight_offset
from ..backbone.unet import ModelConfig
from ..errors import ConfigurationError, FormatError
from ..oneshot import TuneConfig
from ..pipeline import PipelineConfig
from ..vcm import InjectionConfig


@dataclass
class EvalSettings:
    extractor: str = "toy-randproj"


@dataclass
class AppConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)


_MODEL_PRESETS = {"toy": ModelConfig.toy, "mini": ModelConfig.mini}


def _model_from(table: dict) -> ModelConfig:
    table = dict(table)
    preset = table.pop("preset", "toy")
    if preset not in _MODEL_PRESETS:
        raise ConfigurationError(f"unknown model preset {preset!r}")
    for key in ("channels", "style_channels", "style_pool"):
        if key in table:
            table[key] = tuple(table[key])
    return _MODEL_PRESETS[preset](**table)


def load_config(path=None) -> AppConfig:
    if path is None:
        return AppConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"cannot parse config {path}: {exc}") from exc

    model = _model_from(data.get("model", {}))

    tune_table = dict(data.get("tune", {}))
    tune = TuneConfig(**tune_table)

    inj_table = dict(data.get("injection", {}))
    if "whitelist" in inj_table:
        inj_table["whitelist"] = frozenset(inj_table["whitelist"])
    injection = InjectionConfig(**inj_table)

    pipe_table = dict(data.get("pipeline", {}))
    entries = pipe_table.pop("scale_map", None)
    default_scale = pipe_table.pop("default_scale", None)
    if entries is None and default_scale is None:
        scale_map = default_scale_map()
    else:
        base = default_scale_map()
        scale_map = ScaleMap(
            entries=dict(entries) if entries is not None else dict(base.entries),
            default_scale=float(default_scale) if default_scale is not None else base.default_scale,
        )
    offset_path = pipe_table.pop("offset_path", None)
    pipeline = PipelineConfig(
        scale_map=scale_map,
        injection=injection,
        weight_offset=load_weight_offset(offset_path) if offset_path else None,
        **pipe_table,
    )

    eval_settings = EvalSettings(**data.get("eval", {}))
    return AppConfig(model=model, tune=tune, pipeline=pipeline, eval=eval_settings)

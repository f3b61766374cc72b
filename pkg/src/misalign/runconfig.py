"""Strict JSON run configurations for the CLI.

Every command's config is parsed by a checker that rejects unknown keys and
wrong types before any work starts, so a typo'd field never silently falls
back to a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .attack import AttackConfig
from .encoders import CnnConfig, ViTConfig
from .harness.dataset import DatasetSpec
from .objectives import ObjectiveKind

__all__ = [
    "ConfigError",
    "load_json",
    "check_keys",
    "parse_dataset",
    "parse_encoder_config",
    "parse_attack",
    "HeadSpec",
    "parse_heads",
]


class ConfigError(ValueError):
    """Invalid run configuration."""


def load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    return obj


def check_keys(obj: dict, allowed: set[str], required: set[str], ctx: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{ctx}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"{ctx}: missing required keys {sorted(missing)}")


def parse_dataset(obj: dict, ctx: str = "dataset") -> DatasetSpec:
    allowed = {"num_classes", "num_novel", "samples_per_class", "image_size", "seed", "noise_amplitude"}
    check_keys(obj, allowed, set(), ctx)
    try:
        spec = DatasetSpec(**obj)
        spec.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{ctx}: {e}") from e
    return spec


def parse_encoder_config(obj: dict, ctx: str = "encoder"):
    check_keys(obj, {"kind", "config", "seed"}, {"kind"}, ctx)
    kind = obj["kind"]
    cfg_obj = dict(obj.get("config", {}))
    try:
        if kind == "vit":
            check_keys(cfg_obj, {"image_size", "patch_size", "embed_dim", "num_blocks", "num_heads", "mlp_ratio"}, set(), f"{ctx}.config")
            cfg = ViTConfig(**cfg_obj)
        elif kind == "cnn":
            check_keys(cfg_obj, {"stem_channels", "stage_channels", "blocks_per_stage", "mlp_ratio"}, set(), f"{ctx}.config")
            if "stage_channels" in cfg_obj:
                cfg_obj["stage_channels"] = tuple(cfg_obj["stage_channels"])
            cfg = CnnConfig(**cfg_obj)
        else:
            raise ConfigError(f"{ctx}: unknown encoder kind {kind!r}")
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{ctx}: {e}") from e
    return kind, cfg, int(obj.get("seed", 0))


def parse_attack(obj: dict, ctx: str = "attack") -> AttackConfig:
    allowed = {"epsilon", "step_size", "iterations", "objective", "update_rule", "init", "scale_range", "seed"}
    check_keys(obj, allowed, set(), ctx)
    if "objective" in obj:
        check_keys(obj["objective"], {"kind", "layers", "cls_only"}, {"kind"}, f"{ctx}.objective")
    try:
        cfg = AttackConfig.from_json(obj)
        cfg.validate()
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"{ctx}: {e}") from e
    return cfg


@dataclass(frozen=True)
class HeadSpec:
    head_id: str
    kind: str  # linear_cls | seg | zero_shot
    input_size: int | None = None
    tap_layer: int | None = None
    steps: int = 400
    lr: float = 0.05
    seed: int = 0


def parse_heads(objs: list, ctx: str = "heads") -> list[HeadSpec]:
    if not isinstance(objs, list) or not objs:
        raise ConfigError(f"{ctx}: expected a non-empty list")
    out = []
    for i, obj in enumerate(objs):
        c = f"{ctx}[{i}]"
        check_keys(obj, {"id", "kind", "input_size", "tap_layer", "steps", "lr", "seed"}, {"id", "kind"}, c)
        if obj["kind"] not in ("linear_cls", "seg", "zero_shot"):
            raise ConfigError(f"{c}: unknown head kind {obj['kind']!r}")
        out.append(
            HeadSpec(
                head_id=obj["id"],
                kind=obj["kind"],
                input_size=obj.get("input_size"),
                tap_layer=obj.get("tap_layer"),
                steps=int(obj.get("steps", 400)),
                lr=float(obj.get("lr", 0.05)),
                seed=int(obj.get("seed", 0)),
            )
        )
    return out

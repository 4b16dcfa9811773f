"""Run configuration: a flat dataclass mirrored by a flat key=value file.

Every field of :class:`TrainConfig` is a scalar so that the on-disk form is
one ``key = value`` line per field (``#`` comments and blank lines allowed).
Unknown keys are rejected with the nearest valid name, and command-line
overrides reuse the same coercion rules, so flags always win over the file.
"""

from __future__ import annotations

import dataclasses
import difflib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "TrainConfig",
    "ConfigError",
    "toy_config",
    "parse_config_file",
    "apply_overrides",
    "config_to_json",
    "config_from_json",
]


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # run
    seed: int = 0
    max_steps: int = 1000
    batch_size: int = 1024
    dtype: str = "float32"
    checkpoint_every: int = 0  # 0: only the final checkpoint

    # optimizer (decoupled weight decay, linear warmup on the learning rate)
    lr: float = 1e-5
    weight_decay: float = 0.1
    warmup_steps: int = 10000
    clip_norm: float = 0.0  # 0: no gradient clipping

    # contrastive temperature (multiplier on cosine logits)
    tau: float = 100.0

    # encoder pair
    encoder_profile: str = "toy"
    encoder_d: int = 32
    encoder_g: int = 4
    encoder_seed: int = 0
    encoder_resolution: int = 64

    # predictor
    predictor_blocks: int = 12
    predictor_dim: int = 384
    predictor_heads: int = 8
    ffw_ratio: int = 4

    # source-view crop geometry
    crop_scale_lo: float = 0.2
    crop_scale_hi: float = 0.25
    crop_aspect_lo: float = 0.75
    crop_aspect_hi: float = 1.5

    # target mask-block geometry
    block_scale_lo: float = 0.2
    block_scale_hi: float = 0.25
    block_aspect_lo: float = 0.75
    block_aspect_hi: float = 1.5

    # ablation switches
    no_crop: bool = False  # identity source views (no cropping)
    no_action: bool = False  # drop the action row from the predictor input
    no_gate: bool = False  # direct sum instead of the tanh gate
    mask_source: bool = False  # zero a region instead of cropping to it
    predict_entire: bool = False  # mask blocks cover the whole grid
    avg_before_map: bool = False  # pool predictor rows before the fusion map
    standard_residual: bool = False  # conventional transformer residual wiring

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.no_crop and self.mask_source:
            raise ConfigError("no_crop and mask_source are mutually exclusive")
        if self.predictor_dim % self.predictor_heads != 0:
            raise ConfigError("predictor_heads must divide predictor_dim")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def toy_config(seed: int = 0, **overrides) -> TrainConfig:
    """The desk-scale training recipe: toy encoders, a 4-block/64-wide
    predictor, full-batch contrastive steps over a 32-pair corpus, and a hot
    clipped learning rate so 300 steps suffice to overfit. Larger source
    crops than the full-scale default keep per-step view noise manageable at
    this tiny budget."""
    values = dict(
        seed=seed,
        max_steps=300,
        batch_size=32,
        dtype="float64",
        lr=2.5e-2,
        weight_decay=0.1,
        warmup_steps=100,
        clip_norm=2.0,
        tau=100.0,
        encoder_profile="toy",
        encoder_d=32,
        encoder_g=4,
        encoder_seed=0,
        encoder_resolution=64,
        predictor_blocks=4,
        predictor_dim=64,
        predictor_heads=8,
        crop_scale_lo=0.35,
        crop_scale_hi=0.45,
    )
    values.update(overrides)
    return TrainConfig(**values)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    field = _FIELDS[name]
    raw = raw.strip()
    if field.type in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    return raw


def _unknown_key_error(key: str) -> ConfigError:
    near = difflib.get_close_matches(key, _FIELDS, n=1)
    hint = f" (did you mean '{near[0]}'?)" if near else ""
    return ConfigError(f"unknown config key '{key}'{hint}")


def parse_config_file(path: str | Path) -> TrainConfig:
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise _unknown_key_error(key)
        values[key] = _coerce(key, raw)
    return TrainConfig(**values)


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    values = dataclasses.asdict(cfg)
    for key, raw in overrides.items():
        if key not in _FIELDS:
            raise _unknown_key_error(key)
        values[key] = _coerce(key, str(raw))
    return TrainConfig(**values)


def config_to_json(cfg: TrainConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True)


def config_from_json(payload: str) -> TrainConfig:
    return TrainConfig(**json.loads(payload))

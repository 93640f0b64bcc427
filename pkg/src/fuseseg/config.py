"""Run configuration: plain "key = value" files merged with CLI overrides.

Lines may carry '#' comments; unknown keys are rejected with their line
number; a duplicated key warns and the last occurrence wins. Command-line
flags override file values.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .dataio import SyntheticSceneParams
from .model import ModelConfig
from .training import VARIANTS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # model
    stages: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    classes: int = 4
    height: int = 64
    width: int = 64
    # training
    variant: str = "dh"
    lr: float = 1e-5
    epochs: int = 100
    batch_size: int = 4
    optimizer: str = "adam"
    # synthetic scenes
    day_frames: int = 220
    night_frames: int = 50
    obstacle_min: int = 1
    obstacle_max: int = 4
    horizon_min: float = 0.25
    horizon_max: float = 0.45
    alpha: float = 0.05
    sigma: float = 0.03
    location: str = "river"
    difficult_fraction: float = 0.0
    # splits
    split: str = "day-night"
    val_ratio: float = 0.1
    # evaluation
    modalities: tuple[str, ...] = ("rgb", "thermal", "lidar")
    # gradient check
    gc_eps: float = 1e-5
    gc_samples: int = 100

    def model_config(self, multihead: bool | None = None) -> ModelConfig:
        if multihead is None:
            multihead = VARIANTS[self.variant][1]
        return ModelConfig(stages=self.stages, channels=self.channels,
                           classes=self.classes, height=self.height,
                           width=self.width, multihead=multihead)

    def train_config(self) -> TrainConfig:
        return TrainConfig.for_variant(
            self.variant, lr=self.lr, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.seed,
            optimizer=self.optimizer)

    def scene_params(self, night: bool, seed_offset: int = 0) -> SyntheticSceneParams:
        return SyntheticSceneParams(
            height=self.height, width=self.width,
            obstacle_count=(self.obstacle_min, self.obstacle_max),
            horizon_range=(self.horizon_min, self.horizon_max),
            night=night, alpha=self.alpha, sigma=self.sigma,
            seed=self.seed + seed_offset, location=self.location,
            difficult_fraction=self.difficult_fraction)


def _parse_value(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            elem = default[0] if default else "str"
            if isinstance(elem, int):
                return tuple(int(p) for p in parts)
            return tuple(parts)
        return text
    except ValueError as err:
        raise ConfigError(f"cannot parse value for {key!r}: {err}") from err


def load_config(path: Path | None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then file values, then overrides; validates on the way."""
    values: dict = {}
    known = {f.name: getattr(RunConfig(), f.name) for f in fields(RunConfig)}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, text = line.partition("=")
            key, text = key.strip(), text.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                print(f"warning: {path}:{lineno}: duplicate key {key!r}, "
                      f"last occurrence wins", file=sys.stderr)
            try:
                values[key] = _parse_value(key, text, known[key])
            except ConfigError as err:
                raise ConfigError(f"{path}:{lineno}: {err}") from err
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown override key {key!r}")
        values[key] = _parse_value(key, str(val), known[key]) \
            if isinstance(val, str) and not isinstance(known[key], str) else val
    cfg = replace(RunConfig(), **values)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}; expected "
                          f"{sorted(VARIANTS)}")
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)

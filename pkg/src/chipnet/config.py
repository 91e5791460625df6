"""TOML configuration with defaults for every spatial and bit-width setting.

Example file::

    [grid]
    azimuth_bin = 0.5
    rows = 64

    [quant]
    bits = 18

Unknown sections or keys are rejected so that typos do not silently fall
back to defaults.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigurationError
from .fixedpoint import QFormat
from .postprocess import GridMapConfig
from .spherical import GridConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 18
    weight_frac: int | None = None  # default bits - 4
    act_frac: int | None = None  # default bits - 8

    def formats(self) -> tuple[QFormat, QFormat]:
        wf = self.bits - 4 if self.weight_frac is None else self.weight_frac
        af = self.bits - 8 if self.act_frac is None else self.act_frac
        return QFormat(self.bits, max(wf, 0)), QFormat(self.bits, max(af, 0))


@dataclass(frozen=True)
class PostConfig:
    threshold: float = 0.5
    connectivity: int = 4


@dataclass(frozen=True)
class SimConfig:
    clock_mhz: float = 350.0
    slices: int = 64


@dataclass(frozen=True)
class TrainConfig:
    frames: int = 200
    epochs: int = 30
    finetune_epochs: int = 10
    channels: int = 8
    blocks: int = 2
    seed: int = 0


@dataclass(frozen=True)
class Config:
    grid: GridConfig = field(default_factory=GridConfig)
    map: GridMapConfig = field(default_factory=GridMapConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    post: PostConfig = field(default_factory=PostConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def config_from_dict(data: dict, base: Config | None = None) -> Config:
    base = base or Config()
    updates = {}
    known = {f.name for f in fields(Config)}
    for section, values in data.items():
        if section not in known:
            raise ConfigurationError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigurationError(f"[{section}] must be a table")
        current = getattr(base, section)
        allowed = {f.name for f in fields(current)}
        for key in values:
            if key not in allowed:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
        coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        try:
            updates[section] = replace(current, **coerced)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"[{section}]: {e}") from None
    return replace(base, **updates)


def load_config(path: str | None = None) -> Config:
    """Defaults, overridden by the TOML file at ``path`` when given."""
    if path is None:
        return Config()
    with open(path, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from None
    return config_from_dict(data)

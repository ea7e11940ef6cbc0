"""TOML run configuration.

Training keys sit at the top level; component settings live in
``[encoder]``, ``[channel]``, ``[decoder]`` and ``[data]`` tables. Anything
left out takes its default, and unknown keys are rejected.

    lambda = 0.001
    epochs = 100

    [channel]
    snr_db = 10.0
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .channel import ChannelConfig
from .data import SyntheticConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .model import TrainConfig

# TOML key -> TrainConfig attribute, where they differ
_TRAIN_ALIASES = {"lambda": "lam"}
# set once at the top level; the decoder takes its copies from there
_TRAIN_OWNED = {("decoder", "p"), ("decoder", "dropout")}
# fields whose default is None but which take an int
_OPTIONAL_INT = {("channel", "k"), ("encoder", "sandwich_channels"), ("data", "test")}


@dataclass
class DataSettings:
    test: int | None = None  # test-split size; None uses the default rule
    grayscale: bool = True


@dataclass
class RunSettings:
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    data: DataSettings = field(default_factory=DataSettings)

    def with_seed(self, seed: int) -> "RunSettings":
        return dataclasses.replace(
            self,
            train=dataclasses.replace(self.train, seed=seed),
            synthetic=dataclasses.replace(self.synthetic, seed=seed),
        )

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for name in ("train", "encoder", "channel", "decoder", "synthetic", "data"):
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: (_jsonable(v)) for k, v in d.items()}
        return out


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def _coerce(where: str, value: Any, default: Any, optional_int: bool) -> Any:
    if optional_int:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(default, (list, tuple)):
        if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return type(default)(value)
        raise ConfigError(f"{where}: expected a list of numbers, got {value!r}")
    raise ConfigError(f"{where}: unsupported setting")


def _build(section: str, cls, table: dict[str, Any], aliases: dict[str, str] | None = None):
    aliases = aliases or {}
    defaults = cls() if cls is not DataSettings else DataSettings()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        attr = aliases.get(key, key)
        where = f"{section}.{key}" if section != "train" else key
        if attr not in names or (attr in aliases.values() and key not in aliases):
            raise ConfigError(f"unknown config key {where!r}")
        if (section, attr) in _TRAIN_OWNED:
            raise ConfigError(f"unknown config key {where!r}; set {key!r} at the top level")
        kwargs[attr] = _coerce(where, value, getattr(defaults, attr), (section, attr) in _OPTIONAL_INT)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config_text(text: str) -> RunSettings:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    tables = {"encoder": EncoderConfig, "channel": ChannelConfig, "decoder": DecoderConfig, "synthetic": SyntheticConfig, "data": DataSettings}
    top = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    for key, value in raw.items():
        if isinstance(value, dict) and key not in tables:
            raise ConfigError(f"unknown config table [{key}]")
    built = {name: _build(name, cls, raw.get(name, {})) for name, cls in tables.items()}
    train = _build("train", TrainConfig, top, _TRAIN_ALIASES)
    return RunSettings(train=train, **built)


def parse_config(path: str | Path | None) -> RunSettings:
    """Read a TOML config file; ``None`` gives all defaults."""
    if path is None:
        return RunSettings()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text())

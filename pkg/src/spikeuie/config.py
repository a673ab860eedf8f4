"""Run configuration and its flat, typed text format.

One setting per line, ``key : type = value``, where type is one of
``int``, ``float``, ``bool``, ``str`` or ``int[]`` (comma separated)::

    # ablation row (a)
    include "base.cfg"
    net.use_fdm : bool = false
    net.stage_layout : int[] = 2, 2, 4, 1, 1, 1

``include`` pulls in another file (path relative to the including file);
later lines override earlier ones. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .network import NetConfig

__all__ = [
    "ConfigError",
    "OptimConfig",
    "ScheduleConfig",
    "DataConfig",
    "TrainConfig",
    "parse_config",
    "load_config",
    "dump_config",
    "to_flat",
    "from_flat",
]


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")
        self.key, self.line, self.path = key, line, path


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adam"
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0


@dataclass(frozen=True)
class ScheduleConfig:
    iterations: int = 1000
    lr_decay: str = "cosine"
    min_lr: float = 1e-6
    checkpoint_every: int = 500
    eval_every: int = 0


@dataclass(frozen=True)
class DataConfig:
    root: str = "synthetic"
    patch: int = 64
    batch: int = 12
    seed: int = 0
    flip: bool = True
    synthetic_count: int = 256
    synthetic_size: int = 96
    heldout_count: int = 32
    heldout_seed: int = 9000


@dataclass(frozen=True)
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/default"

    def __post_init__(self) -> None:
        if self.data.patch % 4 or self.data.patch < 4:
            raise ConfigError(f"data.patch must be a positive multiple of 4, got {self.data.patch}", "data.patch")
        if self.data.batch < 1:
            raise ConfigError(f"data.batch must be >= 1, got {self.data.batch}", "data.batch")
        if self.schedule.iterations < 1:
            raise ConfigError(f"schedule.iterations must be >= 1, got {self.schedule.iterations}",
                              "schedule.iterations")
        if self.optim.kind != "adam":
            raise ConfigError(f"unsupported optimizer {self.optim.kind!r}", "optim.kind")
        if self.schedule.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"schedule.lr_decay must be 'cosine' or 'none'", "schedule.lr_decay")

    def replace(self, **sections) -> "TrainConfig":
        return dataclasses.replace(self, **sections)


_SECTIONS = ("net", "loss", "optim", "schedule", "data")


def _type_name(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, str):
        return "str"
    if isinstance(value, (tuple, list)):
        return "int[]"
    raise TypeError(f"unsupported config value {value!r}")


def to_flat(cfg: TrainConfig) -> dict[str, object]:
    flat = {}
    for section in _SECTIONS:
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(getattr(cfg, section), f.name)
            flat[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
    flat["out"] = cfg.out
    return flat


SCHEMA: dict[str, str] = {k: _type_name(v) for k, v in to_flat(TrainConfig()).items()}


def from_flat(flat: dict[str, object]) -> TrainConfig:
    base = to_flat(TrainConfig())
    for key in flat:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'", key)
    base.update(flat)
    parts = {}
    classes = {"net": NetConfig, "loss": LossWeights, "optim": OptimConfig,
               "schedule": ScheduleConfig, "data": DataConfig}
    for section, cls in classes.items():
        kwargs = {k.split(".", 1)[1]: v for k, v in base.items() if k.startswith(section + ".")}
        try:
            parts[section] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {section} settings: {exc}", section) from exc
    return TrainConfig(out=base["out"], **parts)


def _parse_value(raw: str, type_name: str):
    raw = raw.strip()
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    if type_name == "bool":
        low = raw.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return low == "true"
    if type_name == "str":
        if len(raw) >= 2 and raw[0] == raw[-1] == '"':
            return raw[1:-1]
        return raw
    if type_name == "int[]":
        return [int(v) for v in raw.split(",") if v.strip()]
    raise ValueError(f"unknown type {type_name!r}")


def _parse_into(text: str, path, flat: dict, depth: int) -> None:
    if depth > 16:
        raise ConfigError("include nesting too deep", path=path)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("include"):
            target = line[len("include"):].strip().strip('"')
            if not target:
                raise ConfigError("include needs a path", line=lineno, path=path)
            inc = Path(target)
            if path is not None and not inc.is_absolute():
                inc = Path(path).parent / inc
            try:
                inc_text = inc.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot include {inc}: {exc}", line=lineno, path=path) from exc
            _parse_into(inc_text, inc, flat, depth + 1)
            continue
        head, sep, raw = line.partition("=")
        key, colon, type_name = head.partition(":")
        key, type_name = key.strip(), type_name.strip()
        if not sep or not colon:
            raise ConfigError(f"expected 'key : type = value', got {line!r}", line=lineno, path=path)
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'", key=key, line=lineno, path=path)
        if type_name != SCHEMA[key]:
            raise ConfigError(f"key '{key}' has type {SCHEMA[key]}, not {type_name}",
                              key=key, line=lineno, path=path)
        try:
            flat[key] = _parse_value(raw, type_name)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {exc}", key=key, line=lineno, path=path) from exc


def parse_config(text: str, path=None) -> TrainConfig:
    flat: dict[str, object] = {}
    _parse_into(text, path, flat, 0)
    return from_flat(flat)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=path) from exc
    return parse_config(text, path)


def _format_value(value, type_name: str) -> str:
    if type_name == "bool":
        return "true" if value else "false"
    if type_name == "float":
        return repr(float(value))
    if type_name == "int[]":
        return ", ".join(str(v) for v in value)
    if type_name == "str":
        return f'"{value}"'
    return str(value)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in to_flat(cfg).items():
        t = SCHEMA[key]
        lines.append(f"{key} : {t} = {_format_value(value, t)}")
    return "\n".join(lines) + "\n"

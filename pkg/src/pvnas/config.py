"""Run configuration: plain-text ``key = value`` lines with dotted section names.

Example::

    # data
    data.synth_days = 30
    task.kind = task2
    task.horizon = 24
    search.T_max = 19
    search.pin.hs = 64
    search.pin.cps = MLP, LSTM
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .dataset import TaskKind
from .search_space import GENES, SearchSpace, _coerce
from .searcher import SearchConfig

HORIZONS = (12, 24, 48, 72, 168, 336)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    data_path: str | None = None
    synth_days: int = 30
    synth_seed: int = 0
    task_kind: TaskKind = TaskKind.TASK1
    horizon: int = 24
    t_s: int = 96
    sigma0: float = 0.05
    gamma: float = 1.0
    search: SearchConfig = field(default_factory=SearchConfig)
    pins: Mapping[str, tuple] = field(default_factory=dict)
    max_epochs: int = 50
    patience: int = 3
    window_step: int = 1
    output_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if self.t_s < 1 or self.horizon < 1:
            raise ConfigError("task.t_s and task.horizon must be >= 1")
        if self.horizon not in HORIZONS:
            raise ConfigError(f"task.horizon must be one of {HORIZONS}, got {self.horizon}")
        if self.synth_days < 1:
            raise ConfigError("data.synth_days must be >= 1")
        if self.window_step < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("train.window_step, train.max_epochs and train.patience must be >= 1")

    @property
    def space(self) -> SearchSpace:
        return SearchSpace(self.pins)


# dotted key -> (RunConfig field, parser)
_KEYS = {
    "data.path": ("data_path", str),
    "data.synth_days": ("synth_days", int),
    "data.synth_seed": ("synth_seed", int),
    "task.kind": ("task_kind", str),
    "task.horizon": ("horizon", int),
    "task.t_s": ("t_s", int),
    "task.sigma0": ("sigma0", float),
    "task.gamma": ("gamma", float),
    "train.max_epochs": ("max_epochs", int),
    "train.patience": ("patience", int),
    "train.window_step": ("window_step", int),
    "output.dir": ("output_dir", str),
    "seed": ("seed", int),
}
_SEARCH_FIELDS = {f.name: f.type for f in fields(SearchConfig)}


def _parse_scalar(text: str, kind) -> object:
    kind = {"int": int, "float": float, "str": str}.get(kind, kind)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict = {}
    search: dict = {}
    pins: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _KEYS:
                name, kind = _KEYS[key]
                values[name] = _parse_scalar(value, kind)
            elif key.startswith("search.pin."):
                gene = key[len("search.pin."):]
                if gene not in GENES:
                    raise ConfigError(f"unknown gene {gene!r}")
                pins[gene] = tuple(_coerce(gene, v.strip()) for v in value.split(","))
            elif key.startswith("search.") and key[len("search."):] in _SEARCH_FIELDS:
                name = key[len("search."):]
                search[name] = _parse_scalar(value, _SEARCH_FIELDS[name])
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    seed = values.get("seed", 0)
    search.setdefault("seed", seed)
    try:
        return RunConfig(search=SearchConfig(**search), pins=pins, **values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))

"""Layered run configuration: built-in defaults, overridden by a flat
key = value config file, overridden by command-line settings.

Config file grammar (one setting per line):

    # comment
    key = value          value is bool | int | float | string |
    key = 1, 2, 3        comma list (parsed as a tuple)

Keys use dotted sections matching RunConfig fields, e.g. ``model.code_dim``
or ``train.steps``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .model import ModelConfig
from .synthdata import SynthConfig
from .training import LossWeights, TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    precision: str = "single"
    deterministic: bool = False
    threads: int = 0  # 0 = all available cores
    seed: int = 0
    samples_per_ray: int = 64  # rendering default (train has its own)
    fg_gate: float = 1e-3

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        td = _retuple(TrainConfig, d["train"])
        if isinstance(td.get("loss_weights"), dict):
            td["loss_weights"] = LossWeights(**td["loss_weights"])
        d["train"] = TrainConfig(**td)
        d["data"] = SynthConfig(**_retuple(SynthConfig, d["data"]))
        return cls(**d)

    def set(self, dotted_key, raw_value):
        """Apply one ``section.field`` (or top-level ``field``) override."""
        parts = dotted_key.split(".")
        obj = self
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise ConfigError(f"unknown config section {dotted_key!r}")
            obj = getattr(obj, p)
        name = parts[-1]
        if not hasattr(obj, name):
            raise ConfigError(f"unknown config key {dotted_key!r}")
        current = getattr(obj, name)
        value = raw_value if not isinstance(raw_value, str) \
            else parse_value(raw_value)
        setattr(obj, name, _coerce(dotted_key, value, current))


def _retuple(cls, d):
    """asdict turns tuples into lists; restore tuple-typed defaults."""
    d = dict(d)
    for f in fields(cls):
        if isinstance(f.default, tuple) and isinstance(d.get(f.name), list):
            d[f.name] = tuple(d[f.name])
    return d


def _coerce(key, value, current):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, (int, float)):
            return int(value)
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(current, float):
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(current, tuple):
        if isinstance(value, tuple):
            return value
        return (value,)
    return value


def parse_value(text):
    """Parse one right-hand-side value of the flat config grammar."""
    text = text.strip()
    if "," in text:
        return tuple(parse_value(p) for p in text.split(",") if p.strip())
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def parse_config_text(text):
    """Flat key = value lines -> dict of dotted key -> parsed value."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = parse_value(val)
    return out


def load_run_config(path=None, overrides=None) -> RunConfig:
    """defaults <- config file <- override pairs [(key, value), ...]."""
    cfg = RunConfig()
    if path:
        with open(path) as f:
            for key, value in parse_config_text(f.read()).items():
                cfg.set(key, value)
    for key, value in (overrides or []):
        cfg.set(key, value)
    return cfg

"""Run configuration: one defaults table, strict TOML loading, dotted overrides."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .depth import WindowSearchConfig
from .losses import LossWeights
from .pipeline import FuseConfig
from .synth import SynthSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    tau: float = 0.005
    n_samples: int = 100_000
    seed: int = 0

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError("eval.tau must be > 0")
        if self.n_samples < 1:
            raise ConfigError("eval.n_samples must be >= 1")


@dataclass
class CheckConfig:
    chamfer_max: float = 0.01
    f1_min: float = 0.7

    def validate(self) -> None:
        if not self.chamfer_max > 0 or not 0 <= self.f1_min <= 1:
            raise ConfigError("check thresholds out of range")


SECTIONS = {
    "synth": SynthSpec,
    "train": TrainConfig,
    "weights": LossWeights,
    "window": WindowSearchConfig,
    "fuse": FuseConfig,
    "eval": EvalConfig,
    "check": CheckConfig,
}


@dataclass
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    window: WindowSearchConfig = field(default_factory=WindowSearchConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    check: CheckConfig = field(default_factory=CheckConfig)

    def validate(self) -> None:
        self.synth.validate()
        self.train.weights = self.weights
        self.train.validate()
        self.window.validate()
        self.fuse.validate()
        self.eval.validate()
        self.check.validate()

    def to_tree(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            d = asdict(sec)
            d.pop("weights", None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out


def defaults_tree() -> dict:
    return RunConfig().to_tree()


def _coerce(section: str, key: str, value, default):
    """Bring a TOML or command-line value to the type of its default."""
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(f"{section}.{key} expects an integer")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, (tuple, list)):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if isinstance(value, (list, tuple)) and len(value) == len(default):
            return tuple(_coerce(section, key, v, d) for v, d in zip(value, default))
    raise ConfigError(f"{section}.{key}: cannot use {value!r} (expected {type(default).__name__})")


def merge(tree: dict, updates: dict, origin: str) -> dict:
    """Apply a nested update with strict unknown-key rejection."""
    base = defaults_tree()
    for section, body in updates.items():
        if section not in base:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"{origin}: [{section}] must be a table")
        for key, value in body.items():
            if key not in base[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            tree[section][key] = _coerce(section, key, value, base[section][key])
    return tree


def parse_override(text: str) -> dict:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, value = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    return {section: {key: value.strip()}}


def load(path=None, overrides=()) -> RunConfig:
    """Defaults, then the TOML file, then overrides; validated."""
    tree = defaults_tree()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        merge(tree, data, str(path))
    for item in overrides:
        merge(tree, item if isinstance(item, dict) else parse_override(item), "override")
    return from_tree(tree)


def from_tree(tree: dict) -> RunConfig:
    try:
        cfg = RunConfig(
            synth=SynthSpec.from_dict(tree["synth"]),
            train=TrainConfig.from_dict(tree["train"]),
            weights=LossWeights(**tree["weights"]),
            window=WindowSearchConfig(**tree["window"]),
            fuse=FuseConfig(**tree["fuse"]),
            eval=EvalConfig(**tree["eval"]),
            check=CheckConfig(**tree["check"]),
        )
        cfg.validate()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def dumps(cfg: RunConfig | dict) -> str:
    tree = cfg.to_tree() if isinstance(cfg, RunConfig) else cfg
    return tomli_w.dumps(tree)


def write(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def section_names(section: str) -> list[str]:
    return [f.name for f in fields(SECTIONS[section]) if f.name != "weights"]

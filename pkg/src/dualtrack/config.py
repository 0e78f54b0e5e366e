"""Flat ``key=value`` configuration files.

Keys are dotted: ``tracker.mu=0.8``, ``learner.lost_ratio=0.25``,
``weights.alpha=0.6,0.3,0.1``. Namespaces map onto the library dataclasses;
unknown or repeated keys are errors. Values parse by the type of the field's
default, with ``.`` as the only decimal separator.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .correlation import LayerWeights
from .features import FeatureProviderConfig
from .labels import LabelConfig
from .losses import LossConfig
from .online_learner import OnlineLearnerConfig
from .sim import SimConfig
from .tracker import TrackerConfig

NESTED = {"learner": "learner", "labels": "labels", "losses": "losses", "weights": "layer_weights"}


class ConfigError(ValueError):
    """Bad configuration (maps to CLI exit code 2)."""


@dataclass(frozen=True)
class ProtocolConfig:
    reinit_delay: int = 5
    burn_in: int = 10

    def __post_init__(self):
        if self.reinit_delay < 1 or self.burn_in < 0:
            raise ValueError("need reinit_delay >= 1 and burn_in >= 0")


@dataclass(frozen=True)
class CliConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    features: FeatureProviderConfig = field(default_factory=FeatureProviderConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def with_seed(self, seed: int) -> "CliConfig":
        return replace(self, tracker=replace(self.tracker, seed=seed), sim=replace(self.sim, seed=seed),
                       features=replace(self.features, seed=seed))


def _scalar_fields(obj, skip=()):
    return [f for f in dataclasses.fields(obj) if f.name not in skip]


def _namespaces(cfg: CliConfig) -> dict:
    """``namespace -> dataclass instance`` for every configurable section."""
    t = cfg.tracker
    return {
        "tracker": t, "learner": t.learner, "labels": t.labels, "losses": t.losses,
        "weights": t.layer_weights, "sim": cfg.sim, "features": cfg.features, "protocol": cfg.protocol,
    }


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, default, key: str):
    t = text.strip()
    try:
        if isinstance(default, bool):
            low = t.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {t!r}")
        if default is None:
            return None if t.lower() == "none" else float(t)
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            return float(t)
        if isinstance(default, tuple):
            items = [x for x in t.split(",") if x.strip()]
            if not items:
                raise ValueError("empty list")
            conv = int if default and all(isinstance(x, int) for x in default) else float
            return tuple(conv(x) for x in items)
        return t
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def flatten(cfg: CliConfig) -> dict[str, str]:
    """Every configurable key with its effective value, defaults included."""
    out = {}
    for ns, obj in _namespaces(cfg).items():
        skip = NESTED.values() if ns == "tracker" else ()
        for f in _scalar_fields(obj, skip):
            out[f"{ns}.{f.name}"] = _format(getattr(obj, f.name))
    return dict(sorted(out.items()))


def known_keys() -> list[str]:
    return list(flatten(CliConfig()))


def apply(cfg: CliConfig, assignments: dict[str, str]) -> CliConfig:
    """Return ``cfg`` with dotted ``key -> text`` assignments applied and validated."""
    spaces = _namespaces(cfg)
    changes: dict[str, dict] = {}
    for key, text in assignments.items():
        ns, _, name = key.partition(".")
        obj = spaces.get(ns)
        valid = obj is not None and name in {f.name for f in dataclasses.fields(obj)}
        if not valid or (ns == "tracker" and name in NESTED.values()):
            raise ConfigError(f"unknown config key {key!r}")
        changes.setdefault(ns, {})[name] = _parse(text, getattr(obj, name), key)
    try:
        built = {ns: replace(obj, **changes[ns]) if ns in changes else obj for ns, obj in spaces.items()}
        tracker = replace(built["tracker"], learner=built["learner"], labels=built["labels"],
                          losses=built["losses"], layer_weights=built["weights"])
        return CliConfig(tracker, built["sim"], built["features"], built["protocol"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str, source: str = "config") -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path=None) -> CliConfig:
    if path is None:
        return CliConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from None
    return apply(CliConfig(), parse_config(text, str(p)))


__all__ = ["CliConfig", "ConfigError", "ProtocolConfig", "apply", "flatten", "known_keys", "load_config",
           "parse_config", "LayerWeights", "LabelConfig", "LossConfig", "OnlineLearnerConfig"]

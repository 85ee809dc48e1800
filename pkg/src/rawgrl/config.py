"""TOML run profiles mapped onto the config dataclasses."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .desim import MacConfig
from .netmodel import ScenarioConfig
from .online import OnlineConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unreadable, malformed or out-of-range configuration."""


@dataclass(frozen=True)
class RunConfig:
    online_updates: int = 100
    mobile_speed: float = 2.0
    policies: tuple = ("proposed", "rand", "unif", "mcon", "mhid", "mint")
    sweep_users: tuple = (20,)
    sweep_groups: tuple = (2, 4, 8)

    def __post_init__(self):
        for name in ("policies", "sweep_users", "sweep_groups"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.online_updates < 1:
            raise ValueError("online_updates must be >= 1")
        if self.mobile_speed < 0:
            raise ValueError("mobile_speed must be >= 0")


@dataclass(frozen=True)
class Profile:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    mac: MacConfig = field(default_factory=MacConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    online: OnlineConfig = field(default_factory=OnlineConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            d = asdict(getattr(self, f.name))
            out[f.name] = {k: _plain(v) for k, v in d.items()}
        return out


SECTIONS = {"scenario": ScenarioConfig, "mac": MacConfig, "train": TrainConfig,
            "online": OnlineConfig, "run": RunConfig}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def default_text() -> str:
    return resources.files("rawgrl").joinpath("defaults.toml").read_text()


def _build(cls, section: str, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_profile(text: str, base: Profile | None = None) -> Profile:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    base = base or Profile()
    parts = {}
    for name, cls in SECTIONS.items():
        merged = {k: v for k, v in asdict(getattr(base, name)).items()}
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        merged.update(section)
        parts[name] = _build(cls, name, merged)
    return Profile(**parts)


def load_profile(path=None) -> Profile:
    """Shipped defaults, overridden by the file at ``path`` if given."""
    base = parse_profile(default_text(), Profile())
    if path is None:
        return base
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_profile(text, base)


def to_toml(profile: Profile) -> str:
    """Serialize a profile back to TOML (flat tables of scalars and arrays)."""
    lines = []
    for section, values in profile.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")

"""Scenario configuration files.

One ``section.key = value`` per line; ``#`` starts a comment. Sections are
``scene``, ``trajectory``, ``noise``, ``sensor``, ``memory``, ``loop`` and
``eval``. Keys mirror the fields of the corresponding dataclasses. Booleans
are ``true``/``false``, tuples are comma-separated, and ``none`` unsets an
optional value (only ``loop.huber_scale``). Omitted keys keep their defaults.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError
from .loop_closure import LoopClosureConfig
from .memory import MemoryConfig
from .pipeline import EvalSettings
from .simulator import NoiseSpec, SceneSpec, SensorSpec, TrajectorySpec

_SECTIONS: dict[str, type] = {
    "scene": SceneSpec,
    "trajectory": TrajectorySpec,
    "noise": NoiseSpec,
    "sensor": SensorSpec,
    "memory": MemoryConfig,
    "loop": LoopClosureConfig,
    "eval": EvalSettings,
}
# feature_dim is owned by the memory section and copied into the scene
_HIDDEN = {("scene", "feature_dim")}
_OPTIONAL = {("loop", "huber_scale")}
_SEEDS = (("scene", "seed"), ("noise", "seed"), ("memory", "rng_seed"))


@dataclass(frozen=True)
class ScenarioConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    loop: LoopClosureConfig = field(default_factory=LoopClosureConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    # sections the source file set at least one key in
    explicit: frozenset[str] = frozenset()

    @property
    def has_scene(self) -> bool:
        return "scene" in self.explicit

    def with_seed(self, seed: int) -> ScenarioConfig:
        """Override every seed in the config."""
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        return dataclasses.replace(
            self,
            scene=dataclasses.replace(self.scene, seed=seed),
            noise=dataclasses.replace(self.noise, seed=seed),
            memory=dataclasses.replace(self.memory, rng_seed=seed),
        )

    def seeds(self) -> dict[str, int]:
        return {f"{s}.{k}": int(getattr(getattr(self, s), k)) for s, k in _SEEDS}

    def to_dict(self) -> dict[str, dict[str, Any]]:
        out = {}
        for name in _SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items() if (name, k) not in _HIDDEN}
        return out

    def dumps(self) -> str:
        """Serialize to the file format; ``loads(dumps())`` reproduces the config."""
        lines = []
        for section, values in self.to_dict().items():
            for k, v in values.items():
                lines.append(f"{section}.{k} = {_format(v)}")
        return "\n".join(lines) + "\n"


def _format(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, default: Any, key: str, line: int) -> Any:
    t = text.strip()
    if isinstance(default, bool):
        low = t.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected true or false, got {t!r}", line)
    if isinstance(default, int):
        try:
            return int(t, 0)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {t!r}", line) from None
    if isinstance(default, float):
        try:
            v = float(t)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {t!r}", line) from None
        if not math.isfinite(v):
            raise ConfigError(f"{key}: value must be finite", line)
        return v
    if not t:
        raise ConfigError(f"{key}: empty value", line)
    return t


def _parse_value(text: str, default: Any, key: str, line: int, optional: bool) -> Any:
    if optional and text.strip().lower() == "none":
        return None
    if isinstance(default, tuple):
        parts = [p for p in text.split(",")]
        if len(parts) != len(default):
            raise ConfigError(f"{key}: expected {len(default)} comma-separated values", line)
        return tuple(_parse_scalar(p, d, key, line) for p, d in zip(parts, default))
    return _parse_scalar(text, default, key, line)


def loads(text: str) -> ScenarioConfig:
    defaults = ScenarioConfig()
    values: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    where: dict[tuple[str, str], int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", lineno)
        lhs, rhs = (s.strip() for s in line.split("=", 1))
        section, dot, key = lhs.partition(".")
        if not dot or section not in _SECTIONS:
            raise ConfigError(f"unknown section in {lhs!r}; expected one of {sorted(_SECTIONS)}", lineno)
        default_obj = getattr(defaults, section)
        names = {f.name for f in dataclasses.fields(default_obj)}
        if key not in names or (section, key) in _HIDDEN:
            raise ConfigError(f"unknown key {lhs!r}", lineno)
        if (section, key) in where:
            raise ConfigError(f"duplicate key {lhs!r} (first set on line {where[(section, key)]})", lineno)
        default = getattr(default_obj, key)
        if default is None:
            default = 0.0
        values[section][key] = _parse_value(rhs, default, lhs, lineno, (section, key) in _OPTIONAL)
        where[(section, key)] = lineno

    def build(section: str, extra: dict | None = None):
        kwargs = dict(values[section], **(extra or {}))
        try:
            return _SECTIONS[section](**kwargs)
        except (ConfigError, ValueError, TypeError) as e:
            msg = str(e)
            raise ConfigError(msg, _blame(section, msg, where)) from None

    memory = build("memory")
    scene = build("scene", {"feature_dim": memory.feature_dim})
    return ScenarioConfig(
        scene=scene,
        trajectory=build("trajectory"),
        noise=build("noise"),
        sensor=build("sensor"),
        memory=memory,
        loop=build("loop"),
        eval=build("eval"),
        explicit=frozenset(s for s, v in values.items() if v),
    )


def _blame(section: str, message: str, where: dict[tuple[str, str], int]) -> int | None:
    """Line of the key a validation message talks about, if it was set in the file."""
    hits = [(message.find(k), line) for (s, k), line in where.items() if s == section and k in message]
    if hits:
        return min(hits)[1]
    lines = [line for (s, _), line in where.items() if s == section]
    return min(lines) if lines else None


def load(path: str | os.PathLike) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {os.fspath(path)!r}: {e.strerror}") from None
    return loads(text)

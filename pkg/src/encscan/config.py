"""Tool configuration: one YAML/JSON document with a section per concern.

Absent keys take the module defaults; unknown keys are an error that names
the offending key.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .data import DataError, PatchTrigger
from .detection import DEFAULT_TAU
from .encoders import PretrainConfig
from .inversion import InversionConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    """Synthetic pretraining data."""

    seed: int = 0
    count: int = 5000
    family: str = "A"
    shape: tuple[int, int, int] = (32, 32, 3)


@dataclass(frozen=True)
class AttackSection:
    trigger: PatchTrigger = PatchTrigger()
    target_label: int = 0
    w_utility: float = 1.0
    w_target: float = 1.0
    w_backdoor: float = 1.0
    alpha: float = 0.0
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    reference_size: int = 2000     # pretraining images the attacker fine-tunes on
    probe_seed: int = 200          # downstream labeled data for ASR / accuracy
    probe_count: int = 3000


@dataclass(frozen=True)
class ScanSection:
    """Inversion settings plus the decision threshold."""

    tau: float = DEFAULT_TAU
    beta: float = -0.99
    batch: int = 128
    max_iters: int = 1000
    lr: float = 0.1
    seed: int = 0
    restarts: int = 4
    init_std: float = 0.1
    restart_init_std: float | None = 2.0   # wide restarts reach sharp backdoors a grey start misses

    def __post_init__(self):
        self.inversion()  # validates beta, batch, max_iters

    def inversion(self) -> InversionConfig:
        return InversionConfig(beta=self.beta, batch=self.batch, max_iters=self.max_iters,
                               lr=self.lr, restarts=self.restarts, seed=self.seed,
                               init_std=self.init_std, restart_init_std=self.restart_init_std)


@dataclass(frozen=True)
class ShadowSection:
    """Where scan-time shadow images come from.

    ``source`` is ``pretraining-subset`` (a random subset of the pretraining
    data), ``synthetic`` (a fresh synthetic family, e.g. ``B``) or ``dir``
    (an image directory at ``path``).
    """

    source: str = "pretraining-subset"
    size: int = 1000
    family: str = "B"
    seed: int = 7
    path: str | None = None


@dataclass(frozen=True)
class HarnessSection:
    n_clean: int = 10
    n_trojaned: int = 10
    asr_gate: float = 0.95
    retries: int = 3
    seed: int = 0
    ablation_bases: int = 3        # clean encoders forged per trigger variant
    shadow_sizes: tuple[int, ...] = (50, 100, 1000)
    alphas: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    external_family: str = "B"


@dataclass(frozen=True)
class ToolConfig:
    data: DataSection = DataSection()
    pretrain: PretrainConfig = PretrainConfig()
    attack: AttackSection = AttackSection()
    scan: ScanSection = ScanSection()
    shadow: ShadowSection = ShadowSection()
    harness: HarnessSection = HarnessSection()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"]["trigger"] = self.attack.trigger.to_dict()
        return _plain(d)

    def override(self, **changes: dict[str, Any]) -> "ToolConfig":
        """Apply ``section={key: value}`` overrides (``None`` values are skipped)."""
        cfg = self
        for name, values in changes.items():
            values = {k: v for k, v in values.items() if v is not None}
            if values:
                cfg = replace(cfg, **{name: _section(type(getattr(cfg, name)), values, name,
                                                     base=getattr(cfg, name))})
        return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _section(cls, raw: Any, name: str, base=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{name}.{key}'")
    base = base if base is not None else cls()
    values = {}
    for key, value in raw.items():
        default = getattr(base, key)
        try:
            values[key] = _coerce(default, value, f"{name}.{key}")
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for '{name}.{key}': {exc}") from None
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


def _coerce(default: Any, value: Any, key: str) -> Any:
    if isinstance(default, PatchTrigger):
        if isinstance(value, PatchTrigger):
            return value
        if not isinstance(value, dict):
            raise ValueError("trigger must be a mapping")
        allowed = {f.name for f in fields(PatchTrigger)}
        for k in value:
            if k not in allowed:
                raise ConfigError(f"unknown key '{key}.{k}'")
        try:
            return PatchTrigger.from_dict({**default.to_dict(), **value})
        except DataError as exc:
            raise ConfigError(f"bad value for '{key}': {exc}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ValueError(f"expected a string, got {value!r}")
    return value


def config_from_dict(raw: dict | None) -> ToolConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    sections = {f.name: f for f in fields(ToolConfig)}
    for key in raw:
        if key not in sections:
            raise ConfigError(f"unknown key '{key}'")
    return ToolConfig(**{name: _section(type(f.default), raw.get(name), name)
                         for name, f in sections.items()})


def load_config(path: str | Path | None) -> ToolConfig:
    """Read a YAML or JSON config file; ``None`` gives the defaults."""
    if path is None:
        return ToolConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return config_from_dict(raw)


def dump_config(config: ToolConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
